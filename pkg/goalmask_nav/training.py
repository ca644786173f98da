"""
Supervised training with goal masking.

Per sample the loss draws a goal mask m ~ Bernoulli(p_m), a diffusion step k
uniform in 1..K and Gaussian noise; the action term is the MSE between the
drawn noise and the predicted noise on the noised expert actions (for the
regression head, the MSE between predicted and expert actions). The distance
term is the MSE between the predicted and labelled temporal distance over the
unmasked samples only; it is exactly zero when every sample is masked.

    total = action + distance_weight * distance

Optimisation is AdamW with linear warmup followed by cosine decay, gradient
clipping at a global norm and a fixed seed for shuffling, masks and noise.
One CSV row per epoch is written to the report.
"""

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from scipy import stats

from . import numcore as nc
from .checkpoint import save_checkpoint
from .dataset import Batch, SampleDataset
from .logger import logger
from .policy import PolicyConfig, PolicyModel, build_policy
from .schedule import add_noise


SELF_DISTANCE_THRESHOLD = 0.1


class TrainingError(Exception):
    """Base exception for training errors."""
    pass


class EmptyBatchError(TrainingError):
    """Raised when a loss is requested for an empty batch."""
    pass


class TrainingDivergedError(TrainingError):
    """Raised when the loss becomes non-finite."""

    def __init__(self, epoch: int, batch_index: int, components: "LossComponents"):
        self.epoch = epoch
        self.batch_index = batch_index
        self.components = components
        super().__init__(
            f"Non-finite loss at epoch {epoch}, batch {batch_index}: "
            f"action={components.diffusion}, distance={components.distance}, total={components.total}"
        )


@dataclass(frozen=True)
class TrainConfig:
    mask_prob: float = 0.5
    distance_weight: float = 1e-4
    learning_rate: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    warmup_epochs: int = 1
    weight_decay: float = 1e-2
    grad_clip_norm: float = 1.0
    seed: int = 0
    checkpoint_every: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.mask_prob <= 1.0:
            raise TrainingError(f"mask_prob {self.mask_prob} outside [0, 1]")
        if self.distance_weight < 0:
            raise TrainingError("distance_weight must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be positive")


@dataclass
class LossComponents:
    diffusion: float
    distance: float
    total: float
    masked_fraction: float

    @property
    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.diffusion, self.distance, self.total))


@dataclass
class EpochStats:
    epoch: int
    diffusion: float
    distance: float
    total: float
    masked_fraction: float
    grad_norm_mean: float
    grad_norm_max: float
    learning_rate: float
    seconds: float


@dataclass
class TrainReport:
    epochs: List[EpochStats] = field(default_factory=list)
    checkpoint_path: Optional[Path] = None
    wall_clock: float = 0.0
    parameter_count: int = 0

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow([name for name in EpochStats.__dataclass_fields__])
            for row in self.epochs:
                writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in asdict(row).values()])
        return path


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def compute_loss(model: PolicyModel, batch: Batch, generator: torch.Generator, mask_prob: float = 0.5,
                 distance_weight: float = 1e-4,
                 mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, LossComponents]:
    """Joint action + distance loss. `mask` overrides the Bernoulli draw when given."""
    B = len(batch)
    if B == 0:
        raise EmptyBatchError("cannot compute a loss on an empty batch")
    dtype = batch.actions.dtype
    if mask is None:
        mask = torch.rand(B, generator=generator, dtype=dtype) < mask_prob
    mask = mask.to(torch.bool)

    context = model.context(batch.context, batch.goal, mask)
    if model.config.head_type == "diffusion":
        k = torch.randint(1, model.config.diffusion_steps + 1, (B,), generator=generator)
        noise = torch.randn(batch.actions.shape, generator=generator, dtype=dtype)
        noisy = add_noise(model.schedule, batch.actions, noise, k)
        action_loss = nc.mse(model.predict_noise(context, noisy, k), noise)
    else:
        action_loss = nc.mse(model.predict_actions(context), batch.actions)

    unmasked = ~mask
    if bool(unmasked.any()):
        predicted = model.predict_distance(context)[unmasked]
        distance_loss = nc.mse(predicted, batch.dist_label[unmasked])
    else:
        distance_loss = torch.zeros((), dtype=dtype)

    total = nc.forward_primitive("add", [action_loss, nc.forward_primitive("mul", [distance_loss, distance_weight])])
    components = LossComponents(
        diffusion=float(action_loss.detach()),
        distance=float(distance_loss.detach()),
        total=float(total.detach()),
        masked_fraction=float(mask.to(dtype).mean()),
    )
    return total, components


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def lr_factor(step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to 1, then cosine decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(model: PolicyModel, dataset: SampleDataset, config: Optional[TrainConfig] = None,
          out_dir: Optional[Union[str, Path]] = None, name: str = "policy",
          indices: Optional[np.ndarray] = None) -> TrainReport:
    """Train `model` in place and write its checkpoint and CSV report under `out_dir`."""
    config = config or TrainConfig()
    config.validate()
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise TrainingError("training dataset is empty")

    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    steps_per_epoch = math.ceil(len(indices) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs

    model.mask_prob = config.mask_prob
    params = [p for p in model.parameters()]
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: lr_factor(s, warmup, total_steps))

    out_dir = Path(out_dir) if out_dir is not None else None
    report = TrainReport(parameter_count=model.parameter_count())
    logger.info(f"Training {name}: {len(indices)} samples, {config.epochs} epochs, p_m={config.mask_prob}, {model.summary()}")
    started = time.time()
    model.train()

    # One loader thread prefetches the next batch while the optimizer step runs.
    with ThreadPoolExecutor(max_workers=1) as loader:
        for epoch in range(1, config.epochs + 1):
            epoch_start = time.time()
            plan = [indices[b] for b in epoch_batches(len(indices), config.batch_size, rng)]
            sums = np.zeros(4)
            norms: List[float] = []
            pending = loader.submit(dataset.batch, plan[0])
            for batch_index in range(len(plan)):
                batch = pending.result()
                if batch_index + 1 < len(plan):
                    pending = loader.submit(dataset.batch, plan[batch_index + 1])
                loss, comps = compute_loss(model, batch, generator, config.mask_prob, config.distance_weight)
                if not comps.finite:
                    raise TrainingDivergedError(epoch, batch_index, comps)
                optimizer.zero_grad()
                loss.backward()
                norm = torch.nn.utils.clip_grad_norm_(params, config.grad_clip_norm)
                optimizer.step()
                scheduler.step()
                norms.append(float(norm))
                sums += (comps.diffusion, comps.distance, comps.total, comps.masked_fraction)

            means = sums / len(plan)
            stats_row = EpochStats(
                epoch=epoch,
                diffusion=float(means[0]),
                distance=float(means[1]),
                total=float(means[2]),
                masked_fraction=float(means[3]),
                grad_norm_mean=float(np.mean(norms)),
                grad_norm_max=float(np.max(norms)),
                learning_rate=float(optimizer.param_groups[0]["lr"]),
                seconds=time.time() - epoch_start,
            )
            report.epochs.append(stats_row)
            logger.info(f"{name} epoch {epoch}/{config.epochs}: action {stats_row.diffusion:.5f}, "
                        f"distance {stats_row.distance:.5f}, grad {stats_row.grad_norm_mean:.3f}")
            if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0 \
                    and epoch != config.epochs:
                model.eval()
                save_checkpoint(model, out_dir / f"{name}-epoch{epoch:03d}.ckpt", _metadata(name, config, epoch))
                model.train()

    model.eval()
    report.wall_clock = time.time() - started
    if out_dir is not None:
        report.checkpoint_path = save_checkpoint(model, out_dir / f"{name}.ckpt", _metadata(name, config, config.epochs))
        report.write_csv(out_dir / f"{name}-report.csv")
    return report


def _metadata(name: str, config: TrainConfig, epoch: int) -> Dict:
    return {"name": name, "epoch": epoch, "train": asdict(config)}


VARIANTS = {
    "unified": {},
    "explore": {"mask_prob": 1.0},
    "goal": {"mask_prob": 0.0},
    "regression": {"head_type": "regression"},
}


def train_variants(dataset: SampleDataset, base: TrainConfig, policy_config: PolicyConfig,
                   out_dir: Union[str, Path], names: Optional[List[str]] = None,
                   indices: Optional[np.ndarray] = None) -> Dict[str, TrainReport]:
    """Train the unified, dedicated-exploration, dedicated-goal and regression-head models.

    All variants share the seed, data and budget; they differ only in mask
    probability or head type.
    """
    reports = {}
    for name in names or list(VARIANTS):
        overrides = dict(VARIANTS[name])
        head_type = overrides.pop("head_type", policy_config.head_type)
        config = replace(base, **overrides)
        model = build_policy(replace(policy_config, head_type=head_type), seed=base.seed)
        reports[name] = train(model, dataset, config, out_dir, name, indices)
    return reports


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class DistanceEvaluation:
    samples: int
    self_fraction: float
    spearman: float


def evaluate_distance(model: PolicyModel, dataset: SampleDataset, indices: Optional[np.ndarray] = None,
                      batch_size: int = 256) -> DistanceEvaluation:
    """Self-goal fraction below 0.1 and Spearman correlation of predicted vs labelled distance."""
    indices = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    predicted, self_predicted, labels = [], [], []
    with torch.no_grad():
        for start in range(0, len(indices), batch_size):
            batch = dataset.batch(indices[start:start + batch_size])
            unmasked = torch.zeros(len(batch), dtype=torch.bool)
            predicted.append(model.predict_distance(model.context(batch.context, batch.goal, unmasked)).numpy())
            own = batch.context[:, -1]
            self_predicted.append(model.predict_distance(model.context(batch.context, own, unmasked)).numpy())
            labels.append(batch.dist_label.numpy())
    if not labels:
        return DistanceEvaluation(0, float("nan"), float("nan"))
    predicted, self_predicted, labels = map(np.concatenate, (predicted, self_predicted, labels))
    rho = stats.spearmanr(predicted, labels).correlation if np.ptp(labels) > 0 else float("nan")
    return DistanceEvaluation(
        samples=len(labels),
        self_fraction=float(np.mean(self_predicted < SELF_DISTANCE_THRESHOLD)),
        spearman=float(rho),
    )


def synthetic_batch(config: PolicyConfig, batch_size: int, seed: int = 0) -> Batch:
    """Random binary patches, actions in [-1, 1] and labels in [0, 1]."""
    g = torch.Generator().manual_seed(seed)
    P1, S, H = config.context + 1, config.patch_size, config.horizon
    dtype = torch.get_default_dtype()
    return Batch(
        context=(torch.rand(batch_size, P1, S, S, generator=g, dtype=dtype) < 0.3).to(dtype),
        goal=(torch.rand(batch_size, S, S, generator=g, dtype=dtype) < 0.3).to(dtype),
        actions=torch.rand(batch_size, H, 2, generator=g, dtype=dtype) * 2 - 1,
        dist_label=torch.rand(batch_size, generator=g, dtype=dtype),
    )


def policy_loss_gradcheck(config: Optional[PolicyConfig] = None, train_config: Optional[TrainConfig] = None,
                          batch_size: int = 4, seed: int = 0, step: float = 1e-3, coords_per_tensor: int = 8,
                          floor: float = 1e-7) -> nc.GradCheckReport:
    """Finite-difference check of the full training loss on a miniature model in float64.

    Half the batch is masked so both the masked and the goal-conditioned
    pathways contribute gradients.
    """
    config = config or PolicyConfig.miniature()
    train_config = train_config or TrainConfig()
    with nc.precision("float64"):
        model = build_policy(config, seed=seed)
        batch = synthetic_batch(config, batch_size, seed)
        mask = torch.arange(batch_size) % 2 == 0

        def loss_fn() -> torch.Tensor:
            generator = torch.Generator().manual_seed(seed)
            loss, _ = compute_loss(model, batch, generator, train_config.mask_prob,
                                   train_config.distance_weight, mask=mask)
            return loss

        report = nc.check_module_gradients(loss_fn, model, step=step, coords_per_tensor=coords_per_tensor,
                                           floor=floor, generator=torch.Generator().manual_seed(seed))
    logger.info(f"Gradient check: max relative error {report.max_rel_error:.3e} at {report.worst}, "
                f"{report.checked} checked, {report.skipped} below floor")
    return report
