"""Two-step semi-supervised training.

Step 1 pretrains the flow predictor on labeled data (segmentation term held
out of the loss). Step 2 trains on homogeneous batches: labeled batches use
the full supervised loss, unlabeled batches push two photometric views of
each image through the shared weights and apply the consistency losses.
Everything is driven by one seeded RNG so identical (config, seed, data)
reproduce identical checkpoints.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .losses import LossWeights, loss_supervised, loss_unsupervised
from .metrics import evaluate_dataset
from .model import ModelConfig, MSUnet, init_weights
from .synth import Sample

__all__ = ["TrainConfig", "TrainState", "augment_pair", "train_step_supervised",
           "train_step_unsupervised", "run_training"]


@dataclass
class TrainConfig:
    """Optimization, loss, and augmentation settings (desk-scale defaults)."""

    lr: float = 1e-4
    weight_decay: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    pretrain_epochs: int = 20
    main_epochs: int = 100
    batch_size: int = 4
    delta: float = 5.0
    lambda1: float = 10.0
    lambda2: float = 10.0
    w_face: float = 3.0
    w_bg: float = 1.0
    unsup_weight: float = 1.0
    noise_sigma_max: float = 0.03
    blur_sigma_max: float = 1.2
    sharpen_max: float = 0.5
    seed: int = 0
    val_frac: float = 0.1
    checkpoint_every: int = 0
    use_drc: bool = True
    use_rc: bool = True
    model: ModelConfig = field(default_factory=ModelConfig.desk)

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")
        if self.pretrain_epochs < 0 or self.main_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["model"]["stage_depths"] = list(d["model"]["stage_depths"])
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        d = json.loads(text)
        if "model" in d:
            m = dict(d["model"])
            m.pop("seg_classes", None)
            m.pop("flow_channels", None)
            m["stage_depths"] = tuple(m["stage_depths"])
            d["model"] = ModelConfig(**m)
        return cls(**d)


@dataclass
class TrainState:
    """Weights + optimizer + counters + augmentation RNG, owned by one loop."""

    model: MSUnet
    optimizer: torch.optim.Optimizer
    gen: torch.Generator
    step: int = 0
    epoch: int = 0


def _make_optimizer(model: MSUnet, config: TrainConfig) -> torch.optim.Optimizer:
    # Adam with decoupled weight decay
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )


def _gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma < 1e-3:
        return image
    radius = max(1, int(math.ceil(2.5 * sigma)))
    xs = torch.arange(-radius, radius + 1, dtype=image.dtype)
    kernel = torch.exp(-(xs**2) / (2 * sigma**2))
    kernel = kernel / kernel.sum()
    c = image.shape[0]
    k_row = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
    k_col = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
    x = image.unsqueeze(0)
    x = torch.nn.functional.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = torch.nn.functional.conv2d(x, k_row, groups=c)
    x = torch.nn.functional.pad(x, (0, 0, radius, radius), mode="replicate")
    x = torch.nn.functional.conv2d(x, k_col, groups=c)
    return x.squeeze(0)


def _augment_one(image: torch.Tensor, gen: torch.Generator, config: TrainConfig) -> torch.Tensor:
    draws = torch.rand(3, generator=gen)
    noise_sigma = float(draws[0]) * config.noise_sigma_max
    blur_sigma = float(draws[1]) * config.blur_sigma_max
    amount = float(draws[2]) * config.sharpen_max
    out = image + noise_sigma * torch.randn(image.shape, generator=gen, dtype=image.dtype)
    out = _gaussian_blur(out, blur_sigma)
    if amount > 0:
        out = out + amount * (out - _gaussian_blur(out, 1.0))
    return out.clamp(0.0, 1.0)


def augment_pair(
    image: torch.Tensor, gen: torch.Generator, config: TrainConfig | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two photometric views (noise, blur, unsharp masking) of one image.

    Geometry is never touched, so both views share the same correct flow.
    With all ranges zeroed both views equal the input.
    """
    config = config or TrainConfig()
    return _augment_one(image, gen, config), _augment_one(image, gen, config)


def _stack_labeled(batch: list[Sample]):
    for s in batch:
        if s.flow_gt is None or s.face_mask is None:
            raise ValueError(f"sample {s.id} is missing flow/mask labels")
    images = torch.stack([torch.from_numpy(s.distorted).float() for s in batch])
    flows = torch.stack([torch.from_numpy(s.flow_gt).float() for s in batch])
    masks = torch.stack([torch.from_numpy(s.face_mask.astype(np.float32)) for s in batch])
    return images, flows, masks


def train_step_supervised(
    batch: list[Sample], state: TrainState, config: TrainConfig, include_ce: bool = True
) -> float:
    """One Adam step on the supervised loss; returns the batch loss."""
    images, flows, masks = _stack_labeled(batch)
    state.model.train()
    state.optimizer.zero_grad()
    flow_pred, seg_logits = state.model(images)
    loss = loss_supervised(
        flow_pred,
        seg_logits,
        flows,
        masks,
        weights=config.loss_weights,
        delta=config.delta,
        w_face=config.w_face,
        w_bg=config.w_bg,
        include_ce=include_ce,
    )
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


def train_step_unsupervised(batch: list[Sample], state: TrainState, config: TrainConfig) -> float:
    """One Adam step on the consistency loss for an unlabeled batch.

    Both augmented views run through the one shared-weight model (the
    siamese branches are weight tying, not copies): the views are stacked
    into a single forward pass.
    """
    views1, views2 = [], []
    for s in batch:
        u1, u2 = augment_pair(torch.from_numpy(s.distorted).float(), state.gen, config)
        views1.append(u1)
        views2.append(u2)
    images = torch.stack(views1 + views2)
    state.model.train()
    state.optimizer.zero_grad()
    flow, seg = state.model(images)
    n = len(batch)
    loss = config.unsup_weight * loss_unsupervised(
        flow[:n],
        flow[n:],
        seg[:n],
        seg[n:],
        weights=config.loss_weights,
        delta=config.delta,
        use_rc=config.use_rc,
        use_drc=config.use_drc,
    )
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return float(loss.detach())


def _batches(indices: list[int], batch_size: int) -> list[list[int]]:
    return [indices[i : i + batch_size] for i in range(0, len(indices), batch_size)]


def _interleave(n_a: int, n_b: int) -> list[str]:
    """Proportional deterministic interleaving of 'L'/'U' batch slots."""
    order = []
    a = b = 0
    while a < n_a or b < n_b:
        # pick the stream lagging behind its proportional share
        if b >= n_b or (a < n_a and a * max(n_b, 1) <= b * max(n_a, 1)):
            order.append("L")
            a += 1
        else:
            order.append("U")
            b += 1
    return order


def _log_record(epoch, loss_s, loss_u, report) -> dict:
    return {
        "epoch": epoch,
        "loss_s": loss_s,
        "loss_u": loss_u,
        "epe": report.epe,
        "lineacc": report.lineacc,
        "shapeacc": report.shapeacc,
    }


def run_training(
    labeled: list[Sample],
    unlabeled: list[Sample],
    config: TrainConfig,
    log_path: str | os.PathLike | None = None,
    checkpoint_base: str | os.PathLike | None = None,
) -> tuple[TrainState, list[dict]]:
    """Full two-step schedule; returns the final state and per-epoch history.

    The labeled set is split 90/10 into train/validation by the config seed.
    With an empty unlabeled set, step 2 degenerates to fully-supervised
    training. History rows carry epoch, losses, and validation EPE /
    line-accuracy / shape-accuracy; row 0 describes the untrained model.
    """
    if not labeled:
        raise ValueError("labeled set must not be empty")
    for s in unlabeled:
        if s.labeled:
            raise ValueError(f"unlabeled set contains labeled sample {s.id}")

    split_rng = np.random.default_rng(config.seed)
    perm = split_rng.permutation(len(labeled))
    n_val = max(1, int(round(config.val_frac * len(labeled)))) if len(labeled) > 1 else 0
    val = [labeled[i] for i in perm[:n_val]]
    train = [labeled[i] for i in perm[n_val:]]

    model = init_weights(config.model, config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    state = TrainState(model=model, optimizer=_make_optimizer(model, config), gen=gen)

    log_file = open(log_path, "w") if log_path else None

    def emit(record):
        history.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()

    def validate():
        model.eval()
        return evaluate_dataset(val, model) if val else evaluate_dataset(train, model)

    history: list[dict] = []
    try:
        emit(_log_record(0, None, None, validate()))

        # step 1: flow-predictor pretraining (no segmentation term)
        for _ in range(config.pretrain_epochs):
            state.epoch += 1
            order = torch.randperm(len(train), generator=gen).tolist()
            losses = [
                train_step_supervised([train[i] for i in b], state, config, include_ce=False)
                for b in _batches(order, config.batch_size)
            ]
            emit(_log_record(state.epoch, float(np.mean(losses)), None, validate()))
            _maybe_checkpoint(state, config, checkpoint_base)

        # step 2: joint training on homogeneous batches, fresh optimizer moments
        state.optimizer = _make_optimizer(model, config)
        use_unlabeled = bool(unlabeled) and (config.use_drc or config.use_rc)
        for _ in range(config.main_epochs):
            state.epoch += 1
            lab_order = torch.randperm(len(train), generator=gen).tolist()
            lab_batches = _batches(lab_order, config.batch_size)
            unlab_batches = []
            if use_unlabeled:
                unlab_order = torch.randperm(len(unlabeled), generator=gen).tolist()
                unlab_batches = _batches(unlab_order, config.batch_size)
            schedule = _interleave(len(lab_batches), len(unlab_batches))
            s_losses, u_losses = [], []
            li = ui = 0
            for slot in schedule:
                if slot == "L":
                    batch = [train[i] for i in lab_batches[li]]
                    li += 1
                    assert all(s.labeled for s in batch)
                    s_losses.append(train_step_supervised(batch, state, config))
                else:
                    batch = [unlabeled[i] for i in unlab_batches[ui]]
                    ui += 1
                    assert not any(s.labeled for s in batch)
                    u_losses.append(train_step_unsupervised(batch, state, config))
            emit(
                _log_record(
                    state.epoch,
                    float(np.mean(s_losses)) if s_losses else None,
                    float(np.mean(u_losses)) if u_losses else None,
                    validate(),
                )
            )
            _maybe_checkpoint(state, config, checkpoint_base)
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return state, history


def _maybe_checkpoint(state: TrainState, config: TrainConfig, base) -> None:
    if base and config.checkpoint_every > 0 and state.epoch % config.checkpoint_every == 0:
        save_checkpoint(Path(f"{base}.epoch{state.epoch:04d}"), state.model)
