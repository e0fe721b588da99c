"""Slice-supervised training: loss, Adam steps, refinement and convergence."""

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .config import TrainConfig
from .errors import ContractViolationError, EmptyCloudError, NonFiniteLossError
from .metrics import loss_window, ssim_with_grad
from .optimizer import Adam
from .rasterizer import CloudGradients, bin_gaussians, prepare_slice, render_backward, render_slice
from .scene.gaussians import cloud_covariances, init_grid_cloud, principal_axes
from .scene.models import SCALE_FLOOR, PARAM_FIELDS, GaussianCloud, RenderedSlice, SliceDataset, SplitLabel

logger = logging.getLogger(__name__)

CheckpointCallback = Callable[[GaussianCloud, int], None]


class StopReason(str, Enum):
    CONVERGED = "converged"
    MAX_STEPS = "max_steps"


@dataclass
class RefinementCounts:
    step: int
    pruned: int = 0
    split: int = 0
    cloned: int = 0
    total: int = 0


@dataclass
class TrainReport:
    """Outcome of one training run."""
    losses: list[float] = field(default_factory=list)
    refinements: list[RefinementCounts] = field(default_factory=list)
    duration_s: float = 0.0
    final_step: int = 0
    stop_reason: StopReason = StopReason.MAX_STEPS
    initial_count: int = 0
    final_count: int = 0
    learning_rates: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    held_out_loss: Optional[float] = None  # mean loss over TEST slices after training

    def to_dict(self, include_timing: bool = True) -> dict:
        data = asdict(self)
        data["stop_reason"] = self.stop_reason.value
        if not include_timing:
            data.pop("duration_s")
        return data

    def write_json(self, path: Path, include_timing: bool = True) -> None:
        Path(path).write_text(json.dumps(self.to_dict(include_timing), indent=2), encoding="utf-8")


class ConvergenceMonitor:
    """Stop once the loss fell by less than delta over the last window steps."""

    def __init__(self, window: int = 100, delta: float = 1e-4):
        self.window = window
        self.delta = delta
        self.losses: list[float] = []

    def record(self, loss: float) -> bool:
        """Append a step loss; True if training should stop after this step."""
        self.losses.append(float(loss))
        s = len(self.losses) - 1
        if s < self.window:
            return False
        return self.losses[s - self.window] - self.losses[s] < self.delta


# ==========================================
# LOSS
# ==========================================

def compute_loss(
    pred: Union[RenderedSlice, np.ndarray], gt: np.ndarray, ssim_weight: float = 0.2
) -> tuple[float, np.ndarray]:
    """(1-λ)·mean|pred-gt| + λ·(1-SSIM) and its gradient w.r.t. pred."""
    image = pred.image if isinstance(pred, RenderedSlice) else np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if image.shape != gt.shape:
        raise ContractViolationError(f"prediction {image.shape} and target {gt.shape} differ in shape")

    diff = image - gt
    loss = (1.0 - ssim_weight) * float(np.mean(np.abs(diff)))
    grad = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    if ssim_weight > 0.0:
        s, s_grad = ssim_with_grad(image, gt, window=loss_window(*gt.shape))
        loss += ssim_weight * (1.0 - s)
        grad -= ssim_weight * s_grad
    return loss, grad


# ==========================================
# STEP
# ==========================================

def resolve_threads(threads: int) -> int:
    return threads if threads > 0 else (os.cpu_count() or 1)


def _slice_pass(
    cloud: GaussianCloud,
    covs: np.ndarray,
    dataset: SliceDataset,
    slice_id: int,
    config: TrainConfig,
    backward: bool = True,
) -> tuple[float, Optional[CloudGradients]]:
    spec = dataset.specs[slice_id]
    context = prepare_slice(cloud, spec, covs)
    bins = bin_gaussians(
        cloud, spec, config.method, config.epsilon, config.tile_size,
        config.box_mode, config.method1_sigma_cutoff, context,
    )
    rendered = render_slice(cloud, spec, bins, config.min_transmittance, context)
    loss, dl_dimage = compute_loss(rendered, dataset.images[slice_id], config.ssim_weight)
    if not backward or not math.isfinite(loss):
        return loss, None
    grads = render_backward(
        cloud, spec, bins, dl_dimage, config.min_transmittance, context, update_stats=False
    )
    return loss, grads


def _run_slices(
    cloud: GaussianCloud,
    dataset: SliceDataset,
    slice_ids: Sequence[int],
    config: TrainConfig,
    backward: bool,
) -> list[tuple[float, Optional[CloudGradients]]]:
    covs = cloud_covariances(cloud)
    threads = resolve_threads(config.threads)

    def _one(sid: int) -> tuple[float, Optional[CloudGradients]]:
        return _slice_pass(cloud, covs, dataset, sid, config, backward)

    if threads <= 1 or len(slice_ids) <= 1:
        return [_one(sid) for sid in slice_ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_one, slice_ids))


def dataset_loss(
    cloud: GaussianCloud, dataset: SliceDataset, slice_ids: Sequence[int], config: TrainConfig
) -> list[float]:
    """Per-slice losses without any update."""
    return [loss for loss, _ in _run_slices(cloud, dataset, slice_ids, config, backward=False)]


def apply_constraints(cloud: GaussianCloud, learning_rates: dict[str, float]) -> None:
    """Clamp log-scales to the floor and renormalize quaternions of updated groups."""
    if learning_rates.get("log_scales", 0.0) > 0.0:
        np.maximum(cloud.log_scales, math.log(SCALE_FLOOR), out=cloud.log_scales)
    if learning_rates.get("rotations", 0.0) > 0.0:
        norms = np.linalg.norm(cloud.rotations.astype(np.float64), axis=1, keepdims=True)
        cloud.rotations[:] = (cloud.rotations / np.maximum(norms, 1e-12)).astype(cloud.dtype)


def train_step(
    cloud: GaussianCloud,
    dataset: SliceDataset,
    slice_ids: Sequence[int],
    config: TrainConfig,
    optimizer: Adam,
) -> float:
    """Render, differentiate and update on the given training slices.

    Per-slice gradients are merged in slice order before the single Adam
    update, so the result does not depend on the thread count.

    Returns:
        Sum of per-slice losses (before the update)
    """
    if not slice_ids:
        raise ContractViolationError("train_step needs at least one training slice")

    results = _run_slices(cloud, dataset, slice_ids, config, backward=True)

    total = 0.0
    merged = CloudGradients.zeros(cloud.count)
    for sid, (loss, grads) in zip(slice_ids, results):
        if not math.isfinite(loss) or grads is None:
            logger.error("Non-finite loss %r on slice %d", loss, sid)
            raise NonFiniteLossError(f"loss is {loss!r}", slice_id=sid)
        total += loss
        merged.add(grads)
        cloud.add_densification_stats(grads.mean_grad_norm, grads.visible)

    optimizer.step(cloud.parameters(), merged.as_dict())
    apply_constraints(cloud, optimizer.learning_rates)
    return total


# ==========================================
# REFINEMENT
# ==========================================

def refine(
    cloud: GaussianCloud,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer: Optional[Adam] = None,
    step: int = 0,
) -> RefinementCounts:
    """Prune, split and clone Gaussians from accumulated gradient statistics."""
    extent = cloud.extent
    opacity = cloud.opacities()
    scales = cloud.scales()

    prune = (
        (opacity < config.tau_alpha)
        | (scales.max(axis=1) > config.too_large_fraction * extent)
        | ~cloud.inside_margin(0.1)
    )
    densify = ~prune & (cloud.grad_accum_norm > config.tau_p)
    covs = cloud_covariances(cloud)
    large = np.linalg.norm(covs, axis=(1, 2)) > config.tau_s * extent
    split = densify & large
    clone = densify & ~large

    remove = prune | split
    remaining = int((~remove).sum()) + int(clone.sum()) + 2 * int(split.sum())
    if remaining == 0:
        logger.error("Refinement at step %d would remove all %d Gaussians", step, cloud.count)
        raise EmptyCloudError(f"refinement at step {step} pruned every Gaussian")

    new_params = [_clone_params(cloud, clone, config, rng), _split_params(cloud, covs, split, config)]
    added = {name: np.concatenate([p[name] for p in new_params]) for name in PARAM_FIELDS}

    keep = ~remove
    cloud.keep(keep)
    cloud.extend(added)
    cloud.reset_densification_stats()
    if optimizer is not None:
        optimizer.prune(keep)
        optimizer.extend(added["means"].shape[0])

    counts = RefinementCounts(
        step=step,
        pruned=int(prune.sum()),
        split=int(split.sum()),
        cloned=int(clone.sum()),
        total=cloud.count,
    )
    logger.info(
        "Refinement at step %d: pruned=%d split=%d cloned=%d total=%d",
        step, counts.pruned, counts.split, counts.cloned, counts.total,
    )
    return counts


def _rows(cloud: GaussianCloud, mask: np.ndarray) -> dict[str, np.ndarray]:
    return {name: getattr(cloud, name)[mask].astype(np.float64) for name in PARAM_FIELDS}


def _clone_params(
    cloud: GaussianCloud, mask: np.ndarray, config: TrainConfig, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    params = _rows(cloud, mask)
    spacing = (cloud.world_bounds[1] - cloud.world_bounds[0]) / config.grid_resolution
    jitter = rng.normal(size=params["means"].shape) * (config.clone_jitter * spacing)
    params["means"] = params["means"] + jitter
    return params


def _split_params(
    cloud: GaussianCloud, covs: np.ndarray, mask: np.ndarray, config: TrainConfig
) -> dict[str, np.ndarray]:
    parent = _rows(cloud, mask)
    lam, axis = principal_axes(covs[mask])
    offset = 0.5 * np.sqrt(lam)[:, None] * axis

    children = {name: np.concatenate([values, values]) for name, values in parent.items()}
    children["means"] = np.concatenate([parent["means"] + offset, parent["means"] - offset])
    children["log_scales"] = children["log_scales"] - math.log(config.split_scale_divisor)
    return children


# ==========================================
# TRAINING LOOP
# ==========================================

def volume_bounds(dataset: SliceDataset) -> np.ndarray:
    return np.array([[0.0, 0.0, 0.0], [float(d) for d in dataset.volume_dims]])


def train(
    dataset: SliceDataset,
    config: TrainConfig,
    initial_cloud: Optional[GaussianCloud] = None,
    on_checkpoint: Optional[CheckpointCallback] = None,
    monitor: Optional[ConvergenceMonitor] = None,
) -> tuple[GaussianCloud, TrainReport]:
    """Run the full optimization loop.

    Args:
        dataset: Labelled slices; only TRAIN slices supervise
        config: Training parameters
        initial_cloud: Starting cloud (grid initialization if None)
        on_checkpoint: Called with (cloud, step) every checkpoint_every steps
        monitor: Convergence rule (built from config if None)

    Returns:
        The trained cloud and its TrainReport
    """
    started = time.perf_counter()
    cloud = initial_cloud if initial_cloud is not None else init_grid_cloud(
        config.grid_resolution, volume_bounds(dataset), config.init
    )
    train_ids = dataset.ids(SplitLabel.TRAIN)
    if config.max_steps > 0 and not train_ids:
        raise ContractViolationError("dataset has no training slices")

    rng = np.random.default_rng(config.seed)
    rates = config.learning_rates
    rates["means"] *= cloud.extent
    optimizer = Adam(rates)
    monitor = monitor or ConvergenceMonitor(config.convergence_window, config.convergence_delta)
    if config.slices_per_step is not None and config.slices_per_step > len(train_ids):
        logger.warning(
            "slices_per_step=%d exceeds the %d training slices; using all of them",
            config.slices_per_step, len(train_ids),
        )
    report = TrainReport(initial_count=cloud.count, learning_rates=rates, seed=config.seed)

    logger.info(
        "Training %d Gaussians on %d slices (max_steps=%d, method=%s)",
        cloud.count, len(train_ids), config.max_steps, config.method.value,
    )
    for step in range(config.max_steps):
        ids = _step_slices(train_ids, config, rng)
        loss = train_step(cloud, dataset, ids, config, optimizer)
        converged = monitor.record(loss)
        report.losses.append(loss)
        done = step + 1
        logger.debug("step %d loss %.6f gaussians %d", done, loss, cloud.count)

        if converged:
            report.stop_reason = StopReason.CONVERGED
            break
        if (
            config.refine_enabled
            and config.refine_start <= done < config.refine_stop
            and done % config.refine_interval == 0
        ):
            report.refinements.append(refine(cloud, config, rng, optimizer, done))
            logger.debug("Adam mean |m| after refinement at step %d: %s", done, optimizer.state_summary())
        if on_checkpoint is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            on_checkpoint(cloud, done)

    report.final_step = len(report.losses)
    report.final_count = cloud.count
    test_ids = dataset.ids(SplitLabel.TEST)
    if test_ids:
        report.held_out_loss = float(np.mean(dataset_loss(cloud, dataset, test_ids, config)))
    report.duration_s = time.perf_counter() - started
    logger.info(
        "Training stopped after %d steps (%s), %d Gaussians, %.1fs",
        report.final_step, report.stop_reason.value, cloud.count, report.duration_s,
    )
    return cloud, report


def _step_slices(train_ids: list[int], config: TrainConfig, rng: np.random.Generator) -> list[int]:
    if config.slices_per_step is None or config.slices_per_step >= len(train_ids):
        return train_ids
    chosen = rng.choice(len(train_ids), size=config.slices_per_step, replace=False)
    return [train_ids[i] for i in sorted(chosen)]
