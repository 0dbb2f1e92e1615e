"""Stage 1: output-space adversarial alignment of each source-target pair."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, bce_with_logits, one_hot, softmax, softmax_cross_entropy
from .data import DomainDataset
from .optim import SGD, Adam, poly_lr
from .segnet import AGNOSTIC, ModelBundle

logger = logging.getLogger(__name__)

WARMUP_CSV_HEADER = ["iteration", "domain_id", "seg_loss", "adv_loss", "disc_loss", "learning_rate"]

SOURCE_LABEL = 1.0
TARGET_LABEL = 0.0


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class WarmupConfig:
    iterations: int = 2000
    batch_size: int = 4
    lambda_adv: float = 0.001
    lr: float = 0.01
    lr_disc: float = 1e-4
    momentum: float = 0.9
    power: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be nonnegative")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")


def step_rng(seed: int, iteration: int, *stream: int) -> np.random.Generator:
    """Independent generator per (seed, iteration, stream) so runs replay exactly."""
    return np.random.default_rng([seed, iteration, *stream])


def sample_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=min(batch_size, n), replace=False)


def discriminator_loss(bundle: ModelBundle, p_src: Tensor, p_tgt: Tensor, domain_index: int) -> Tensor:
    """BCE(D(p_src), source) + BCE(D(p_tgt), target), each averaged over patches."""
    return bce_with_logits(bundle.discriminate(p_src, domain_index), SOURCE_LABEL) + bce_with_logits(
        bundle.discriminate(p_tgt, domain_index), TARGET_LABEL
    )


def generator_loss(
    bundle: ModelBundle,
    x_src,
    y_src,
    x_tgt,
    domain_index: int,
    lambda_adv: float,
    training: bool = False,
    rng: np.random.Generator | None = None,
    parts: dict | None = None,
) -> Tensor:
    """Source CE of head i plus lambda_adv * BCE(D_i(target prediction), source label).

    ``y_src`` may be integer labels [N,H,W] or one-hot [N,K,H,W]. When
    ``parts`` is given it receives the intermediate tensors for reuse.
    """
    x_src = bundle.as_input(x_src)
    target = _one_hot(y_src, bundle.config.num_classes)
    feats, _ = bundle.encode(x_src, training, rng)
    logits_src = bundle.classify(feats, domain_index, logits=True)
    seg = softmax_cross_entropy(logits_src, target)
    loss = seg
    p_tgt = None
    adv = None
    if x_tgt is not None:
        p_tgt = bundle.forward(x_tgt, domain_index, training=training, rng=rng)
        adv = bce_with_logits(bundle.discriminate(p_tgt, domain_index), SOURCE_LABEL)
        loss = seg + lambda_adv * adv
    if parts is not None:
        parts.update(features=feats, logits_src=logits_src, seg=seg, adv=adv, p_tgt=p_tgt, target=target)
    return loss


def _one_hot(y, k: int) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    return one_hot(y, k) if y.ndim == 3 else y


def _check_finite(value: float, what: str, iteration: int, domain: int) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(f"non-finite {what} at iteration {iteration}, target {domain}: {value}")


def warmup_run(
    bundle: ModelBundle,
    source: DomainDataset,
    targets: list[DomainDataset],
    config: WarmupConfig,
    adversarial: bool = True,
    log_path: str | Path | None = None,
) -> tuple[ModelBundle, list[dict]]:
    """Alternate one generator and one discriminator step per target per iteration.

    The domain-agnostic head is trained on source CE alongside every
    generator step. With ``adversarial=False`` targets are never touched
    and the run is plain supervised training on the source.
    """
    if len(targets) < 1:
        raise ValueError("warm-up needs at least one target domain")
    if len(targets) != bundle.num_targets:
        raise ValueError(f"bundle has {bundle.num_targets} target heads but {len(targets)} target datasets were given")
    k = bundle.config.num_classes
    dtype = bundle.config.dtype
    seg_opt = SGD(bundle.parameters(bundle.segmentation_owners()), config.lr, config.momentum, config.weight_decay)
    disc_opts = [Adam(bundle.parameters(f"disc_{i}"), config.lr_disc) for i in range(len(targets))]
    log: list[dict] = []

    for it in range(config.iterations):
        lr = poly_lr(config.lr, it, config.iterations, config.power)
        seg_opt.lr = lr
        batch_rng = step_rng(config.seed, it, 0)
        src_idx = sample_indices(batch_rng, len(source), config.batch_size)
        x_src = source.images[src_idx].astype(dtype)
        y_src = one_hot(source.labels[src_idx], k, dtype)
        tgt_idx = [sample_indices(batch_rng, len(t), config.batch_size) for t in targets]

        for i, tgt in enumerate(targets):
            drop_rng = step_rng(config.seed, it, 1, i)
            bundle.zero_grad()
            x_tgt = tgt.images[tgt_idx[i]].astype(dtype) if adversarial else None
            parts: dict = {}
            loss = generator_loss(bundle, x_src, y_src, x_tgt, i, config.lambda_adv, True, drop_rng, parts)
            loss = loss + softmax_cross_entropy(bundle.classify(parts["features"], AGNOSTIC, logits=True), y_src)
            _check_finite(loss.item(), "generator loss", it, i)
            loss.backward()
            seg_opt.step()

            disc_value = float("nan")
            if adversarial:
                bundle.zero_grad()
                p_src = softmax(parts["logits_src"]).detach()
                d_loss = discriminator_loss(bundle, p_src, parts["p_tgt"].detach(), i)
                disc_value = d_loss.item()
                _check_finite(disc_value, "discriminator loss", it, i)
                d_loss.backward()
                disc_opts[i].step()
            log.append(
                {
                    "iteration": it,
                    "domain_id": tgt.domain_id,
                    "seg_loss": parts["seg"].item(),
                    "adv_loss": parts["adv"].item() if parts["adv"] is not None else float("nan"),
                    "disc_loss": disc_value,
                    "learning_rate": lr,
                }
            )
        if it % 100 == 0:
            logger.info("warmup it=%d seg=%.4f lr=%.2e", it, log[-1]["seg_loss"], lr)
    bundle.zero_grad()
    if log_path is not None:
        write_csv(log_path, WARMUP_CSV_HEADER, log)
    return bundle, log


def write_csv(path: str | Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
