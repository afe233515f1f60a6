"""Objectives and the two-phase training schedule.

Phase one ("pretrain") trains the compressor on clean patches through the
guidance branch with the rate-distortion objective. Phase two ("finetune")
feeds synthetic noisy patches through the denoising branch, keeps the clean
reconstruction target, and adds the feature guidance loss against the clean
branch's (detached) features.

Distortion conventions: for ``mse`` the distortion is the mean squared error
on the 0..255 scale, so the tabulated lambda values keep their usual meaning;
for ``msssim`` it is ``1 - MS-SSIM``.
"""
from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .codec.checkpoint import CheckpointError, dump_records, load_model, load_records, save_model
from .codec.model import METRICS, QUALITIES, ArchConfig, CodecModel
from .entropy.latents import encode_image, latent_bits
from .metrics import ms_ssim_tensor, psnr
from .noise import sample_noise_params, synthesize_noise
from .tensor import F, Adam, Tensor, adam_step, backward, no_grad

LAMBDA_MSE = {"q1": 0.0018, "q2": 0.0035, "q3": 0.0067, "q4": 0.0130, "q5": 0.0250, "q6": 0.0483}
LAMBDA_MSSSIM = {"q2": 4.58, "q3": 8.73, "q5": 31.73, "q6": 60.50}
PIXEL_SCALE = 255.0
CSV_FIELDS = ("epoch", "lr", "bpp_z1", "bpp_z2", "D", "G", "L", "skipped_steps")


class TrainingError(RuntimeError):
    """Training cannot continue (non-finite loss, missing weights, bad config)."""


def default_lambda(quality: str, metric: str) -> float:
    table = LAMBDA_MSE if metric == "mse" else LAMBDA_MSSSIM
    if quality not in table:
        raise ValueError(f"no tabulated lambda_d for {quality} under {metric}; set lambda_d explicitly")
    return table[quality]


@dataclass
class TrainConfig:
    quality: str = "q1"
    metric: str = "mse"
    lambda_d: Optional[float] = None
    lambda_g: float = 3.0
    batch_size: int = 8
    epochs: int = 60
    lr: float = 1e-4
    lr_decay_epochs: Tuple[int, ...] = (45, 55)
    lr_decay_factor: float = 0.1
    warmup_epochs: int = 2
    warmup_start_lr: float = 1e-6
    loss_cap_factor: float = 5.0
    loss_cap_window: int = 100
    patch_size: int = 64
    steps_per_epoch: Optional[int] = None
    seed: int = 0
    arch: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.quality not in QUALITIES:
            raise ValueError(f"quality must be one of {QUALITIES}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.lambda_d is None:
            self.lambda_d = default_lambda(self.quality, self.metric)
        if not self.lambda_d > 0:
            raise ValueError("lambda_d must be positive")
        if self.lambda_g < 0:
            raise ValueError("lambda_g must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.lr <= 0 or self.warmup_start_lr <= 0:
            raise ValueError("learning rates must be positive")

    def arch_config(self) -> ArchConfig:
        return ArchConfig.from_dict(self.arch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def learning_rate(config: TrainConfig, epoch: int, phase: str) -> float:
    """Per-epoch learning rate.

    Fine-tuning starts with a linear ramp: epoch ``e < warmup`` uses
    ``start + (base - start) * e / warmup``. Afterwards (and throughout
    pretraining) the base rate is multiplied by the decay factor once per
    decay epoch already reached.
    """
    if phase == "finetune" and epoch < config.warmup_epochs:
        frac = epoch / config.warmup_epochs
        return config.warmup_start_lr + (config.lr - config.warmup_start_lr) * frac
    n_decays = sum(1 for e in config.lr_decay_epochs if epoch >= e)
    return config.lr * config.lr_decay_factor**n_decays


@dataclass
class LossReport:
    bpp_z1: float
    bpp_z2: float
    distortion: float
    guidance: float
    lambda_d: float
    lambda_g: float

    @property
    def rd(self) -> float:
        """Rate-distortion part, i.e. the objective without the guidance term."""
        return self.bpp_z1 + self.bpp_z2 + self.lambda_d * self.distortion

    @property
    def total(self) -> float:
        return self.rd + self.lambda_g * self.guidance

    @staticmethod
    def mean(reports: Sequence["LossReport"]) -> "LossReport":
        if not reports:
            nan = float("nan")
            return LossReport(nan, nan, nan, nan, nan, nan)
        cols = np.array([[r.bpp_z1, r.bpp_z2, r.distortion, r.guidance] for r in reports], dtype=np.float64)
        m = cols.mean(axis=0)
        return LossReport(float(m[0]), float(m[1]), float(m[2]), float(m[3]), reports[0].lambda_d, reports[0].lambda_g)


def bits_per_pixel(lik: Tensor, num_pixels: int) -> Tensor:
    return F.mul(F.tsum(F.log2(lik)), -1.0 / num_pixels)


def distortion(x: Tensor, x_hat: Tensor, metric: str) -> Tensor:
    if x.shape != x_hat.shape:
        raise ValueError(f"reconstruction shape {x_hat.shape} != target shape {x.shape}")
    if metric == "mse":
        diff = F.sub(x_hat, x)
        return F.mul(F.mean(F.mul(diff, diff)), PIXEL_SCALE**2)
    if metric == "msssim":
        return F.sub(1.0, ms_ssim_tensor(x, x_hat))
    raise ValueError(f"unknown metric {metric!r}")


def rd_loss(x: Tensor, x_hat: Tensor, lik1: Tensor, lik2: Tensor, lambda_d: float, metric: str,
            config: Optional[TrainConfig] = None) -> Tuple[Tensor, LossReport]:
    """Rate (both latents, bits per pixel) plus lambda_d times distortion."""
    if config is not None and (config.metric != metric or config.lambda_d != lambda_d):
        raise ValueError(f"metric/lambda ({metric}, {lambda_d}) disagree with the config "
                         f"({config.metric}, {config.lambda_d})")
    b, _, h, w = x.shape
    r1 = bits_per_pixel(lik1, b * h * w)
    r2 = bits_per_pixel(lik2, b * h * w)
    d = distortion(x, x_hat, metric)
    loss = F.add(F.add(r1, r2), F.mul(d, lambda_d))
    report = LossReport(float(r1.data), float(r2.data), float(d.data), 0.0, lambda_d, 0.0)
    return loss, report


def guidance_loss(z0: Tensor, z0_gt: Tensor, z1: Tensor, z1_gt: Tensor) -> Tensor:
    """Mean absolute feature difference, summed over the two levels."""
    if z0.shape != z0_gt.shape or z1.shape != z1_gt.shape:
        raise ValueError(f"feature shapes differ: {z0.shape}/{z0_gt.shape}, {z1.shape}/{z1_gt.shape}")
    return F.add(F.mean(F.abs(F.sub(z0, z0_gt))), F.mean(F.abs(F.sub(z1, z1_gt))))


class LossCap:
    """Skip threshold: ``factor`` times the median of the last ``window`` applied losses.

    The threshold is infinite until ``window`` losses have been recorded.
    """

    def __init__(self, factor: float = 5.0, window: int = 100, history: Sequence[float] = ()):
        self.factor = factor
        self.window = window
        self.history = deque((float(v) for v in history), maxlen=window)

    @property
    def threshold(self) -> float:
        if len(self.history) < self.window:
            return math.inf
        return self.factor * float(np.median(np.fromiter(self.history, np.float64)))

    def admits(self, loss: float) -> bool:
        return loss <= self.threshold

    def record(self, loss: float) -> None:
        self.history.append(float(loss))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator,
                    limit: Optional[int] = None) -> Iterator[np.ndarray]:
    """Shuffled index batches; the incomplete tail batch is dropped."""
    order = rng.permutation(n)
    count = max(n // batch_size, 1)
    if limit is not None:
        count = min(count, limit)
    for i in range(count):
        yield order[i * batch_size : (i + 1) * batch_size]


class Trainer:
    """Stateful driver for one phase; all randomness flows from one generator."""

    def __init__(self, model: CodecModel, config: TrainConfig, phase: str):
        if phase not in ("pretrain", "finetune"):
            raise ValueError(f"unknown phase {phase!r}")
        if model.metric != config.metric or model.quality != config.quality:
            raise ValueError(f"model is {model.quality}/{model.metric}, config asks for "
                             f"{config.quality}/{config.metric}")
        self.model = model
        self.config = config
        self.phase = phase
        if phase == "pretrain":
            denoiser_ids = {id(p) for p in model.denoiser_parameters()}
            params = [p for p in model.parameters() if id(p) not in denoiser_ids]
        else:
            params = model.parameters()
        self.optimizer = Adam(params, lr=learning_rate(config, 0, phase))
        self.rng = np.random.default_rng(config.seed)
        self.cap = LossCap(config.loss_cap_factor, config.loss_cap_window)
        self.epoch = 0
        self.applied_steps = 0
        self.skipped_steps = 0

    # -- one mini-step --------------------------------------------------------
    def compute_loss(self, x_clean: np.ndarray, x_noisy: Optional[np.ndarray] = None):
        cfg = self.config
        clean = Tensor(np.ascontiguousarray(x_clean, dtype=self.model.dtype))
        if self.phase == "pretrain":
            bundle = self.model.forward_train(clean, self.rng, "guidance")
            return rd_loss(clean, bundle.x_hat, bundle.lik1, bundle.lik2, cfg.lambda_d, cfg.metric)
        noisy = Tensor(np.ascontiguousarray(x_noisy, dtype=self.model.dtype))
        bundle = self.model.forward_train(noisy, self.rng, "denoising", x_guide=clean)
        loss, report = rd_loss(clean, bundle.x_hat, bundle.lik1, bundle.lik2, cfg.lambda_d, cfg.metric)
        g = guidance_loss(bundle.z0, bundle.z0_gt, bundle.z1, bundle.z1_gt)
        report.guidance = float(g.data)
        report.lambda_g = cfg.lambda_g
        return F.add(loss, F.mul(g, cfg.lambda_g)), report

    def step(self, x_clean: np.ndarray, x_noisy: Optional[np.ndarray] = None) -> Tuple[LossReport, bool]:
        """One optimization step; returns the report and whether it was applied."""
        loss, report = self.compute_loss(x_clean, x_noisy)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {self.epoch} (rate {report.bpp_z1:.4g}+"
                                f"{report.bpp_z2:.4g}, distortion {report.distortion:.4g}, "
                                f"guidance {report.guidance:.4g})")
        if self.phase == "finetune" and not self.cap.admits(value):
            self.skipped_steps += 1
            return report, False
        params = self.optimizer.params
        for p in params:
            p.grad = None
        grads = backward(loss, inputs=params)
        adam_step(params, grads, self.optimizer.state)
        for p in params:
            p.grad = None
        self.cap.record(value)
        self.applied_steps += 1
        return report, True

    def noisy_batch(self, clean: np.ndarray) -> np.ndarray:
        params = sample_noise_params(self.rng)
        seed = int(self.rng.integers(0, 2**63 - 1))
        return synthesize_noise(clean, params, seed)

    # -- epochs ---------------------------------------------------------------
    def run_epoch(self, data: np.ndarray) -> Tuple[LossReport, int]:
        cfg = self.config
        self.optimizer.lr = learning_rate(cfg, self.epoch, self.phase)
        skipped_before = self.skipped_steps
        reports: List[LossReport] = []
        for idx in iterate_batches(len(data), cfg.batch_size, self.rng, cfg.steps_per_epoch):
            clean = data[idx]
            noisy = self.noisy_batch(clean) if self.phase == "finetune" else None
            report, applied = self.step(clean, noisy)
            if applied:
                reports.append(report)
        self.epoch += 1
        return LossReport.mean(reports), self.skipped_steps - skipped_before

    def fit(self, data: np.ndarray, out_dir=None, log_path=None, epochs: Optional[int] = None,
            callback=None) -> CodecModel:
        """Run up to ``config.epochs`` (or ``epochs`` more) epochs, checkpointing each one."""
        data = np.asarray(data, dtype=self.model.dtype)
        if data.ndim != 4 or data.shape[1] != 3:
            raise ValueError(f"training data must be (N, 3, H, W), got {data.shape}")
        end = self.config.epochs if epochs is None else min(self.epoch + epochs, self.config.epochs)
        while self.epoch < end:
            lr = learning_rate(self.config, self.epoch, self.phase)
            report, skipped = self.run_epoch(data)
            if log_path is not None:
                append_log(log_path, self.epoch - 1, lr, report, skipped)
            if out_dir is not None:
                self.save(out_dir)
            if callback is not None:
                callback(self.epoch - 1, report, skipped)
        return self.model

    # -- checkpoints -------------------------------------------------------------
    def state(self) -> dict:
        return {
            "phase": self.phase, "epoch": self.epoch, "applied_steps": self.applied_steps,
            "skipped_steps": self.skipped_steps, "rng": self.rng.bit_generator.state,
            "loss_history": list(self.cap.history), "config": self.config.to_dict(),
            "adam_t": self.optimizer.state.t,
        }

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        state = self.state()
        save_model(self.model, out / f"epoch_{self.epoch:03d}.jdcm", extra=state)
        save_model(self.model, out / "last.jdcm", extra=state)
        optim = dump_records({"adam_t": self.optimizer.state.t}, self.optimizer.state_arrays())
        tmp = out / "optimizer.jdcm.tmp"
        tmp.write_bytes(optim)
        tmp.replace(out / "optimizer.jdcm")

    @classmethod
    def resume(cls, out_dir) -> "Trainer":
        out = Path(out_dir)
        model, extra = load_model(out / "last.jdcm")
        if "phase" not in extra:
            raise CheckpointError(f"{out / 'last.jdcm'} carries no trainer state")
        trainer = cls(model, TrainConfig.from_dict(extra["config"]), extra["phase"])
        trainer.epoch = int(extra["epoch"])
        trainer.applied_steps = int(extra["applied_steps"])
        trainer.skipped_steps = int(extra["skipped_steps"])
        trainer.rng.bit_generator.state = extra["rng"]
        trainer.cap.history.extend(extra["loss_history"])
        header, arrays = load_records((out / "optimizer.jdcm").read_bytes())
        trainer.optimizer.load_state_arrays(arrays, header["adam_t"])
        return trainer


def append_log(path, epoch: int, lr: float, report: LossReport, skipped: int) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(CSV_FIELDS)
        writer.writerow([epoch, repr(float(lr)), repr(report.bpp_z1), repr(report.bpp_z2),
                         repr(report.distortion), repr(report.guidance), repr(report.total), skipped])


def read_log(path) -> List[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def new_model(config: TrainConfig) -> CodecModel:
    return CodecModel(config.arch_config(), config.quality, config.metric, seed=config.seed)


def pretrain(model: Optional[CodecModel], data: np.ndarray, config: TrainConfig, out_dir=None,
             log_path=None, callback=None) -> CodecModel:
    """Rate-distortion training on clean patches through the guidance branch."""
    if model is None:
        model = new_model(config)
    return Trainer(model, config, "pretrain").fit(data, out_dir, log_path, callback=callback)


def finetune(model: Optional[CodecModel], data: np.ndarray, config: TrainConfig, out_dir=None,
             log_path=None, callback=None) -> CodecModel:
    """Joint training on synthetic noisy/clean pairs with the guidance loss."""
    if model is None:
        raise TrainingError("fine-tuning needs a pretrained model")
    return Trainer(model, config, "finetune").fit(data, out_dir, log_path, callback=callback)


# -- evaluation helpers used by tests and the CLI ---------------------------------
def surrogate_objective(model: CodecModel, clean: np.ndarray, noisy: Optional[np.ndarray], lambda_d: float,
                        metric: str, seed: int = 0, batch_size: int = 8) -> LossReport:
    """Mean training objective (noise-surrogate quantization, fixed seed) without updates.

    With ``noisy`` the denoising branch encodes the noisy input and the
    guidance term is filled in; otherwise the guidance branch encodes ``clean``.
    """
    rng = np.random.default_rng(seed)
    reports = []
    with no_grad():
        for s in range(0, len(clean), batch_size):
            x = Tensor(np.ascontiguousarray(clean[s : s + batch_size], dtype=model.dtype))
            if noisy is None:
                bundle = model.forward_train(x, rng, "guidance")
            else:
                xn = Tensor(np.ascontiguousarray(noisy[s : s + batch_size], dtype=model.dtype))
                bundle = model.forward_train(xn, rng, "denoising", x_guide=x)
            _, rep = rd_loss(x, bundle.x_hat, bundle.lik1, bundle.lik2, lambda_d, metric)
            if noisy is not None:
                rep.guidance = float(guidance_loss(bundle.z0, bundle.z0_gt, bundle.z1, bundle.z1_gt).data)
            reports.append(rep)
    return LossReport.mean(reports)


def coded_performance(model: CodecModel, clean: np.ndarray, source: Optional[np.ndarray] = None) -> dict:
    """Rounded-latent rate (coder tables, no container) and clamped-output quality.

    ``source`` is what the encoder sees (defaults to ``clean``); quality is
    always measured against ``clean``.
    """
    source = clean if source is None else source
    bpps, dists, psnrs = [], [], []
    for xc, xs in zip(clean, source):
        xs = np.ascontiguousarray(xs[None], dtype=model.dtype)
        bundle = encode_image(model, xs)
        bits = sum(latent_bits(bundle, model))
        with no_grad():
            x_hat = model.synthesize(bundle.z1_hat, clamp=True).data[0]
        _, h, w = xc.shape
        bpps.append(bits / (h * w))
        with no_grad():
            d = distortion(Tensor(xc[None].astype(np.float64)), Tensor(x_hat[None].astype(np.float64)),
                           model.metric)
        dists.append(float(d.data))
        psnrs.append(psnr(xc, x_hat))
    return {"bpp": float(np.mean(bpps)), "D": float(np.mean(dists)), "psnr": float(np.mean(psnrs))}
