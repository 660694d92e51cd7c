"""Loss, optimizers, augmentation and the training loop.

Training minimizes the batch L2 loss (1/2B) * sum_i ||D_gt_i - D_est_i||^2
at 1/8 resolution against sum-pooled ground truth. Augmentation is a
random 8-aligned crop of quarter area plus a 50% horizontal mirror per
draw. Everything is driven by a single seeded generator, so a rerun with
the same config reproduces the trajectory bit-exactly.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from . import tensor as T
from .errors import ConfigurationError, DimensionError, NumericalError, UsageError
from .geometry import PerspectiveMap, RoiMask
from .groundtruth import DensityMap, downsample_density, total_count
from .tensor import Tensor4

DS_FACTOR = 8


@dataclass
class TrainConfig:
    optimizer: str = "adam"          # "sgd" | "adam"
    batch_size: int = 1
    learning_rate: float = None      # default 1e-4 adam, 1e-6 sgd
    epochs: int = 10
    seed: int = 0
    crop_enabled: bool = True
    mirror_enabled: bool = True
    checkpoint_every: int = 0        # epochs; 0 disables

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate is None:
            self.learning_rate = 1e-4 if self.optimizer == "adam" else 1e-6
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


@dataclass
class Sample:
    """One training/evaluation item."""
    image: np.ndarray                # (1, 3, h, w) float32 in [0, 1]
    gt_density_full: DensityMap
    gt_density_ds: DensityMap
    perspective: PerspectiveMap = None
    roi: RoiMask = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def image_dims(self):
        return self.image.shape[2:]


def make_sample(image, gt_density_full, perspective=None, roi=None, name=""):
    return Sample(image=image, gt_density_full=gt_density_full,
                  gt_density_ds=downsample_density(gt_density_full, DS_FACTOR),
                  perspective=perspective, roi=roi, name=name)


# ---------------------------------------------------------------------------
# loss

def l2_loss(est_batch, gt_batch):
    """(1/2B) * sum_i ||gt_i - est_i||^2 as a differentiable scalar.

    est_batch: list of (1,1,h,w) Tensor4; gt_batch: matching DensityMaps
    or arrays.
    """
    if len(est_batch) != len(gt_batch) or not est_batch:
        raise DimensionError("batch size mismatch or empty batch")
    b = len(est_batch)
    total = None
    for est, gt in zip(est_batch, gt_batch):
        gt_values = gt.values if isinstance(gt, DensityMap) else np.asarray(gt)
        if gt_values.shape != est.dims[2:] or est.dims[:2] != (1, 1):
            raise DimensionError(f"estimate {est.dims} vs ground truth {gt_values.shape}")
        gt_t = Tensor4(gt_values[None, None].astype(est.dtype))
        diff = T.sub(est, gt_t)
        sq = T.tensor_sum(T.mul(diff, diff))
        total = sq if total is None else T.add(total, sq)
    return T.scale(total, 1.0 / (2 * b))


# ---------------------------------------------------------------------------
# optimizers

def _iter_grads(params):
    for name, t in params.items():
        if t.grad is None:
            raise UsageError(f"parameter {name!r} has no gradient; run backward first")
        yield name, t


def sgd_step(params, lr):
    """p <- p - lr * g for every parameter."""
    for _, t in _iter_grads(params):
        t.data -= (lr * t.grad).astype(t.dtype)


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update. `state` holds moment buffers and the
    step counter and is mutated in place."""
    state.setdefault("t", 0)
    state["t"] += 1
    t_step = state["t"]
    if t_step < 1:
        raise UsageError("adam step counter must be >= 1")
    for name, t in _iter_grads(params):
        m, v = state.setdefault(name, (np.zeros_like(t.data, dtype=np.float64),
                                       np.zeros_like(t.data, dtype=np.float64)))
        g = t.grad.astype(np.float64)
        m[:] = beta1 * m + (1 - beta1) * g
        v[:] = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1 ** t_step)
        vhat = v / (1 - beta2 ** t_step)
        t.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(t.dtype)


# ---------------------------------------------------------------------------
# augmentation

def mirror(sample):
    """Horizontal flip of every spatial field; an exact involution."""
    persp = sample.perspective
    if persp is not None:
        persp = PerspectiveMap(
            persp.values[:, ::-1].copy(),
            normalized_values=None if persp.normalized_values is None
            else persp.normalized_values[:, ::-1].copy(),
            meta=dict(persp.meta))
    roi = sample.roi
    if roi is not None:
        roi = RoiMask(roi.values[:, ::-1].copy())
    return Sample(image=sample.image[:, :, :, ::-1].copy(),
                  gt_density_full=DensityMap(sample.gt_density_full.values[:, ::-1].copy(),
                                             meta=dict(sample.gt_density_full.meta)),
                  gt_density_ds=DensityMap(sample.gt_density_ds.values[:, ::-1].copy(),
                                           meta=dict(sample.gt_density_ds.meta)),
                  perspective=persp, roi=roi, name=sample.name, meta=dict(sample.meta))


def random_crop(sample, rng):
    """Quarter-area crop (half each side), top-left aligned to the 8-pixel
    grid so the pooled ground truth corresponds exactly. Too-small images
    are returned unchanged."""
    h, w = sample.image_dims
    ch = (h // 2) // DS_FACTOR * DS_FACTOR
    cw = (w // 2) // DS_FACTOR * DS_FACTOR
    if h < 16 or w < 16 or ch < DS_FACTOR or cw < DS_FACTOR:
        return sample
    ty = int(rng.integers(0, (h - ch) // DS_FACTOR + 1)) * DS_FACTOR
    tx = int(rng.integers(0, (w - cw) // DS_FACTOR + 1)) * DS_FACTOR

    full = DensityMap(sample.gt_density_full.values[ty:ty + ch, tx:tx + cw].copy(),
                      meta=dict(sample.gt_density_full.meta))
    persp = sample.perspective
    if persp is not None:
        persp = PerspectiveMap(
            persp.values[ty:ty + ch, tx:tx + cw].copy(),
            normalized_values=None if persp.normalized_values is None
            else persp.normalized_values[ty:ty + ch, tx:tx + cw].copy(),
            meta=dict(persp.meta))
    roi = sample.roi
    if roi is not None:
        roi = RoiMask(roi.values[ty:ty + ch, tx:tx + cw].copy())
    return Sample(image=sample.image[:, :, ty:ty + ch, tx:tx + cw].copy(),
                  gt_density_full=full,
                  gt_density_ds=downsample_density(full, DS_FACTOR),
                  perspective=persp, roi=roi, name=sample.name, meta=dict(sample.meta))


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def add(self, epoch, mean_loss, train_mae, wall_seconds):
        self.rows.append({"epoch": epoch, "mean_loss": mean_loss,
                          "train_mae": train_mae, "wall_seconds": wall_seconds})

    def write_csv(self, path, deterministic_timing=False):
        """CSV with columns epoch, mean_loss, train_mae, wall_seconds.

        deterministic_timing writes 0.0 for wall_seconds so a rerun with the
        same config produces a byte-identical file.
        """
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "mean_loss", "train_mae", "wall_seconds"])
            for row in self.rows:
                secs = 0.0 if deterministic_timing else row["wall_seconds"]
                writer.writerow([row["epoch"], repr(float(row["mean_loss"])),
                                 repr(float(row["train_mae"])), repr(float(secs))])


def _pmap_tensor(sample, dtype):
    if sample.perspective is None or sample.perspective.normalized_values is None:
        raise UsageError(f"sample {sample.name!r} lacks a normalized perspective map "
                         "(required by ECAN)")
    scaled = sample.perspective.normalized_values / 255.0   # image range [0,1]
    return Tensor4(scaled[None, None].astype(dtype))


def _first_nonfinite(graph):
    for node in graph.nodes:
        if not np.isfinite(node.data).all():
            return node.op
    return "unknown"


def forward_sample(params, sample):
    """Forward pass for one sample, handling the ECAN perspective input."""
    dtype = np.float64 if params.config.dtype == "float64" else np.float32
    image = Tensor4(sample.image.astype(dtype))
    pmap_in = _pmap_tensor(sample, dtype) if params.config.variant == "ECAN" else None
    return model_mod.forward(params, image, pmap_input=pmap_in)


def train(dataset, params, config, on_epoch=None):
    """Optimize `params` in place; returns (params, TrainLog)."""
    if not dataset:
        raise UsageError("empty training dataset")
    rng = np.random.default_rng(config.seed)
    adam_state = {}
    log = TrainLog()
    iteration = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        losses = []
        abs_errs = []
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start:start + config.batch_size]
            ests, gts = [], []
            for i in batch_idx:
                sample = dataset[int(i)]
                if config.crop_enabled:
                    sample = random_crop(sample, rng)
                if config.mirror_enabled and rng.integers(0, 2) == 1:
                    sample = mirror(sample)
                est = forward_sample(params, sample)
                ests.append(est)
                gts.append(sample.gt_density_ds)
                abs_errs.append(abs(float(est.data.sum())
                                    - total_count(sample.gt_density_ds)))
            loss = l2_loss(ests, gts)
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                graph = T.Graph(loss)
                raise NumericalError(f"non-finite loss at iteration {iteration}; "
                                     f"first non-finite tensor op: {_first_nonfinite(graph)}")
            params.zero_grad()
            T.backward(loss)
            if config.optimizer == "sgd":
                sgd_step(params, config.learning_rate)
            else:
                adam_step(params, adam_state, config.learning_rate)
            losses.append(loss_val)
            iteration += 1
        log.add(epoch, float(np.mean(losses)), float(np.mean(abs_errs)),
                time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, params, log)
    return params, log
