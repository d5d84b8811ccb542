"""
Conditional flow-matching training of :class:`TinyFlowNet` on rendered (grid, condition view) pairs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
import param
import torch
from tqdm.auto import tqdm

from mvgrid_edit.definitions import LOGGER_NAME
from mvgrid_edit.errors import ConfigError, DataError, NumericalError
from mvgrid_edit.processing.mvgrid import draw_noise
from mvgrid_edit.processing.synth import SceneRecord
from mvgrid_edit.processing.velocity import FlowSample, TinyFlowNet, flow_matching_loss

logger = logging.getLogger(LOGGER_NAME)

LOSS_COLUMNS = ["epoch", "mean_loss"]


class TrainConfig(param.Parameterized):
    epochs = param.Integer(default=500, bounds=(0, None))
    batch_size = param.Integer(default=16, bounds=(1, None))
    learning_rate = param.Number(default=1e-3, bounds=(0, None))
    optimizer = param.Selector(default="adam", objects=["adam", "sgd"])
    seed = param.Integer(default=0, bounds=(0, 2**64 - 1))
    checkpoint_every = param.Integer(default=0, bounds=(0, None), doc="write an intermediate checkpoint every k epochs")
    cond_drop = param.Number(default=0.1, bounds=(0, 1), doc="probability of training on the null condition")
    noise_condition = param.Boolean(default=True, doc="noise the condition view at the record's t")

    def __init__(self, **params):
        unknown = sorted(set(params) - set(self.field_names()))
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        try:
            super().__init__(**params)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def field_names(cls) -> list[str]:
        return [name for name in cls.param if name != "name"]

    def to_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.field_names()}


@dataclass(frozen=True)
class TrainingExample:
    x0: np.ndarray
    cond: np.ndarray
    scene_id: str
    role: str


def training_examples(records: Iterable[SceneRecord]) -> list[TrainingExample]:
    """Both the source and the edited pair of every record, each grid with its own condition view."""
    examples = []
    for record in records:
        examples.append(TrainingExample(record.src_grid.pixels, record.src_cond.pixels, record.id, "src"))
        examples.append(TrainingExample(record.tar_grid.pixels, record.tar_cond.pixels, record.id, "tar"))
    return examples


def sample_training_batch(
    examples: Sequence[TrainingExample],
    rng: np.random.Generator,
    batch_size: int = 16,
    indices: Optional[Sequence[int]] = None,
    cond_drop: float = 0.0,
    noise_condition: bool = False,
) -> list[FlowSample]:
    """
    Draw one flow-matching batch.

    Records come from ``indices`` when given, otherwise uniformly with replacement. Per record and in this order the
    generator yields the record index, ``t ~ U(0, 1)``, the grid noise, the condition noise and the dropout roll.
    A dropped condition is replaced by the clean null view.
    """
    if len(examples) == 0:
        raise DataError("cannot sample a training batch from an empty dataset")
    count = batch_size if indices is None else len(indices)
    batch = []
    for i in range(count):
        example = examples[int(rng.integers(len(examples))) if indices is None else indices[i]]
        t = float(rng.uniform(0.0, 1.0))
        n = draw_noise(rng, example.x0.shape)
        n_cond = draw_noise(rng, example.cond.shape)
        dropped = rng.random() < cond_drop
        if dropped:
            batch.append(FlowSample(example.x0, np.zeros_like(example.cond), t, n))
        else:
            batch.append(FlowSample(example.x0, example.cond, t, n, n_cond if noise_condition else None))
    return batch


def _make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def epoch_checkpoint_path(path: Path | str, epoch: int) -> Path:
    """
    >>> epoch_checkpoint_path("out/model.bin", 20).as_posix()
    'out/model.epoch20.bin'
    """
    path = Path(path)
    return path.with_name(f"{path.stem}.epoch{epoch}{path.suffix}")


def train(
    model: TinyFlowNet,
    examples: Sequence[TrainingExample],
    cfg: TrainConfig,
    checkpoint_path: Optional[Path | str] = None,
) -> tuple[TinyFlowNet, pd.DataFrame]:
    """
    Fit ``model`` in place by minimizing the flow-matching loss; return it with the per-epoch mean loss.

    An epoch visits every example once in a seeded random order. The loss reported for an epoch is the mean of its
    batch losses, each taken before that batch's parameter update.
    """
    if len(examples) == 0:
        raise DataError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    optimizer = _make_optimizer(model, cfg)
    curve = []
    deterministic = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", unit="epoch", disable=None):
            order = rng.permutation(len(examples))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = sample_training_batch(
                    examples,
                    rng,
                    indices=order[start : start + cfg.batch_size],
                    cond_drop=cfg.cond_drop,
                    noise_condition=cfg.noise_condition,
                )
                optimizer.zero_grad()
                loss = flow_matching_loss(model, batch)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise NumericalError(
                        f"non-finite flow matching loss at epoch {epoch}, batch starting at {start}", step=epoch
                    )
                loss.backward()
                optimizer.step()
                losses.append(value)
            mean_loss = float(np.mean(losses))
            curve.append((epoch, mean_loss))
            logger.info(f"epoch {epoch}: mean loss {mean_loss:.6g}")
            if checkpoint_path is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                model.save(epoch_checkpoint_path(checkpoint_path, epoch))
    finally:
        torch.use_deterministic_algorithms(deterministic)

    if checkpoint_path is not None:
        model.save(checkpoint_path)
        logger.info(f"Wrote checkpoint {checkpoint_path}")
    return model, pd.DataFrame(curve, columns=LOSS_COLUMNS)
