"""Joint end-to-end rate-distortion training of the I- and P-models.

The loss is D + lambda * R with D the per-frame MSE summed over the clip
and R the estimated code length in bits per pixel, both reported
per-pixel-normalized; all three codecs, their hyper codecs and the
context networks train together through the noise-quantized chain.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .data_model import Clip, ModelConfig, PAPER_LAMBDAS
from .dataset import ClipSource, load_clips, random_crop
from .video_codec import VideoModel

__all__ = [
    "TrainPlan",
    "RDLoss",
    "rd_loss",
    "lr_schedule",
    "TrainingDiverged",
    "train",
    "train_sweep",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint was kept."""


@dataclass
class TrainPlan:
    """Training schedule. Desk defaults are drastically reduced from the
    full-scale settings (100 epochs, batch 16, crop 256), which remain
    reachable through the fields."""

    lambda_rd: float = 0.01
    steps: int = 2000
    batch_size: int = 4
    crop: int = 64
    clip_length: int = 4
    intra_only: bool = False
    lr_initial: float = 1e-4
    lr_final: float = 1.2e-6
    seed: int = 0
    pool_clips: int = 48
    eval_every: int = 500
    log_every: int = 25
    snapshot_every: int = 100
    config: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.lambda_rd <= 0:
            raise ValueError("lambda must be positive")
        if self.lr_final >= self.lr_initial:
            raise ValueError("final lr must be below initial lr")
        if self.clip_length < 2 and not self.intra_only:
            raise ValueError("P-frame training needs clip_length >= 2")


def lr_schedule(step: int, plan: TrainPlan) -> float:
    """Cosine decay from lr_initial to lr_final over plan.steps."""
    t = min(max(step, 0), plan.steps) / max(plan.steps, 1)
    return plan.lr_final + 0.5 * (plan.lr_initial - plan.lr_final) * (1 + math.cos(math.pi * t))


@dataclass
class RDLoss:
    total: torch.Tensor
    distortion: torch.Tensor
    rate_bpp: torch.Tensor
    rate_bits: torch.Tensor
    frame_rates_bits: list[torch.Tensor]


def rd_loss(model_out: dict, clips: torch.Tensor, lambda_rd: float) -> RDLoss:
    """D + lambda * R over a batch of clips.

    D sums per-frame MSE; R sums -log2 likelihood over every latent and
    hyper latent, averaged over the batch. The headline rate is bits per
    pixel; raw bits are kept in the breakdown.
    """
    b, t = clips.shape[0], clips.shape[1]
    h, w = clips.shape[-2], clips.shape[-1]
    distortion = clips.new_zeros(())
    rate_bits = clips.new_zeros(())
    frame_rates = []
    for i in range(t):
        distortion = distortion + torch.mean((clips[:, i] - model_out["recons"][i]) ** 2)
        frame_bits = clips.new_zeros(())
        for like in model_out["likelihoods"][i].values():
            frame_bits = frame_bits - torch.log2(like).sum() / b
        frame_rates.append(frame_bits)
        rate_bits = rate_bits + frame_bits
    rate_bpp = rate_bits / (h * w)
    total = distortion + lambda_rd * rate_bpp
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite RD loss (D={float(distortion)}, R_bpp={float(rate_bpp)})"
        )
    return RDLoss(total, distortion, rate_bpp, rate_bits, frame_rates)


def _clip_pool(source: ClipSource, plan: TrainPlan) -> list[np.ndarray]:
    pool = []
    for clip in load_clips(source):
        if clip.gop_size < plan.clip_length:
            continue
        pool.append(clip.as_array()[: plan.clip_length])
        if len(pool) >= plan.pool_clips:
            break
    if not pool:
        raise ValueError("clip source produced no usable clips")
    return pool


def _sample_batch(pool: list[np.ndarray], plan: TrainPlan, rng: np.random.Generator) -> torch.Tensor:
    batch = []
    for _ in range(plan.batch_size):
        arr = pool[int(rng.integers(0, len(pool)))]
        h, w = arr.shape[-2], arr.shape[-1]
        side = min(plan.crop, h, w)
        top = int(rng.integers(0, h - side + 1))
        left = int(rng.integers(0, w - side + 1))
        batch.append(arr[:, top:top + side, left:left + side])
    x = torch.from_numpy(np.stack(batch)).unsqueeze(2)  # (B, T, 1, H, W)
    return x


def save_checkpoint(path, model: VideoModel, plan: TrainPlan, metrics: list[dict]):
    plan_dict = asdict(plan)
    plan_dict["config"] = plan.config.to_dict()
    torch.save(
        {
            "state_dict": model.state_dict(),
            "config": model.config.to_dict(),
            "config_hash": model.config.config_hash(),
            "plan": plan_dict,
            "metrics": metrics,
        },
        path,
    )


def load_checkpoint(path, force: bool = False) -> tuple[VideoModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig.from_dict(blob["config"])
    if not force and config.config_hash() != blob["config_hash"]:
        raise ValueError(
            f"checkpoint {path} config hash mismatch; pass force=True to load anyway"
        )
    model = VideoModel(config)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob


@dataclass
class TrainResult:
    model: VideoModel
    metrics: list[dict]
    checkpoint_path: Path | None


def train(plan: TrainPlan, source: ClipSource, out_dir=None,
          metrics_path=None) -> TrainResult:
    """Run the RD training loop; reproducible given plan.seed.

    A non-finite loss aborts with TrainingDiverged after restoring and
    saving the last good weights.
    """
    torch.manual_seed(plan.seed)
    config = plan.config.replace(lambda_rd=plan.lambda_rd)
    model = VideoModel(config)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=plan.lr_initial)
    noise_gen = torch.Generator().manual_seed(plan.seed + 1)
    rng = np.random.default_rng(np.random.SeedSequence((plan.seed, 0x7261)))
    pool = _clip_pool(source, plan)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics: list[dict] = []
    metrics_file = None
    if metrics_path is not None:
        metrics_file = open(metrics_path, "w")
    last_good = copy.deepcopy(model.state_dict())
    t_start = time.time()

    # Fixed held-out batch for periodic evaluation, drawn from an
    # independent seed stream so it never appears in the training pool.
    val_rng = np.random.default_rng(np.random.SeedSequence((plan.seed, 0xE7A1)))
    val_batch = _sample_batch(pool, plan, val_rng)

    def _held_out_eval(step: int) -> dict:
        model.eval()
        with torch.no_grad():
            out = model(val_batch, training=False)
            val = rd_loss(out, val_batch, plan.lambda_rd)
        model.train()
        return {
            "step": step,
            "val_loss": float(val.total),
            "val_D": float(val.distortion),
            "val_bpp_estimate": float(val.rate_bpp) / plan.clip_length,
        }

    try:
        for step in range(plan.steps):
            lr = lr_schedule(step, plan)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = _sample_batch(pool, plan, rng)
            try:
                out = model(batch, training=True, generator=noise_gen)
                loss = rd_loss(out, batch, plan.lambda_rd)
            except TrainingDiverged:
                model.load_state_dict(last_good)
                if out_dir is not None:
                    save_checkpoint(out_dir / "diverged_last_good.pt", model, plan, metrics)
                raise
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()

            if step % plan.snapshot_every == 0:
                last_good = copy.deepcopy(model.state_dict())
            if step % plan.log_every == 0 or step == plan.steps - 1:
                rec = {
                    "step": step,
                    "loss": float(loss.total.detach()),
                    "D": float(loss.distortion.detach()),
                    "R_bits": float(loss.rate_bits.detach()),
                    "bpp_estimate": float(loss.rate_bpp.detach()) / plan.clip_length,
                    "lr": lr,
                    "elapsed_s": round(time.time() - t_start, 2),
                }
                metrics.append(rec)
                if metrics_file:
                    metrics_file.write(json.dumps(rec) + "\n")
                    metrics_file.flush()
            if plan.eval_every and step and step % plan.eval_every == 0:
                try:
                    rec = _held_out_eval(step)
                except TrainingDiverged:
                    rec = {"step": step, "val_loss": float("nan")}
                metrics.append(rec)
                if metrics_file:
                    metrics_file.write(json.dumps(rec) + "\n")
                    metrics_file.flush()
                log.info("step %d held-out loss %s", step, rec.get("val_loss"))
    finally:
        if metrics_file:
            metrics_file.close()

    model.eval()
    path = None
    if out_dir is not None:
        path = out_dir / f"ckpt_lambda{plan.lambda_rd:g}.pt"
        save_checkpoint(path, model, plan, metrics)
    return TrainResult(model=model, metrics=metrics, checkpoint_path=path)


def train_sweep(base_plan: TrainPlan, source: ClipSource, out_dir,
                lambdas=PAPER_LAMBDAS) -> list[Path]:
    """One checkpoint per lambda, tagged by its value."""
    paths = []
    for lam in lambdas:
        plan = copy.deepcopy(base_plan)
        plan.lambda_rd = lam
        result = train(plan, source, out_dir=out_dir)
        paths.append(result.checkpoint_path)
    return paths
