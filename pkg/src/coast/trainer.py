"""Stage-2 cooperative self-training loop and ablation driver."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .autograd import NormalizationError, Tensor, softmax_cross_entropy
from .data import DomainDataset
from .optim import SGD
from .segnet import AGNOSTIC, ModelBundle
from .selftrain import (
    KD_MODES,
    PseudoLabelBank,
    consistency_loss,
    kd_loss,
    rectification_weight,
    rectified_cross_pl_loss,
    rectified_pl_loss,
    refresh_pseudo_labels,
)
from .warmup import TrainingDivergedError, sample_indices, step_rng, write_csv

logger = logging.getLogger(__name__)

METRICS_CSV_HEADER = [
    "iteration",
    "domain",
    "loss_total",
    "loss_seg",
    "loss_kd",
    "loss_pl",
    "loss_pl_sty",
    "loss_cst",
    "mean_rect_weight",
]

# ablation rows: (self_train_only, use_crossdonorm, use_consistency, use_rectification)
VARIANTS = {
    "i": dict(self_train_only=True, use_crossdonorm=False, use_consistency=False, use_rectification=False),
    "ii": dict(self_train_only=False, use_crossdonorm=True, use_consistency=False, use_rectification=False),
    "iii": dict(self_train_only=False, use_crossdonorm=True, use_consistency=True, use_rectification=False),
    "iv": dict(self_train_only=False, use_crossdonorm=True, use_consistency=False, use_rectification=True),
    "v": dict(self_train_only=False, use_crossdonorm=True, use_consistency=True, use_rectification=True),
}


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 4
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.0
    n_b: int = 200
    lambda_pair: float = 1.0
    gamma: float = 1.0
    self_train_only: bool = False
    use_crossdonorm: bool = True
    use_consistency: bool = True
    use_rectification: bool = True
    kd_mode: str = "soft"
    seed: int = 0
    augment: bool = True
    flip: bool = True
    crop_size: int | None = 24
    jitter: float = 0.1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.lambda_pair < 0 or self.gamma < 0:
            raise ValueError("lambda and gamma must be nonnegative")
        if self.kd_mode not in KD_MODES:
            raise ValueError(f"kd_mode must be one of {KD_MODES}")
        if not self.self_train_only and not self.use_crossdonorm and (self.use_consistency or self.use_rectification):
            raise ValueError("consistency and rectification need cross-domain stylization")

    @property
    def crossdonorm(self) -> bool:
        return self.use_crossdonorm and not self.self_train_only

    @property
    def consistency(self) -> bool:
        return self.crossdonorm and self.use_consistency

    @property
    def rectification(self) -> bool:
        return self.crossdonorm and self.use_rectification

    @classmethod
    def variant(cls, name: str, **overrides) -> "TrainConfig":
        if name not in VARIANTS:
            raise KeyError(f"unknown ablation variant {name!r}; expected one of {list(VARIANTS)}")
        return cls(**{**VARIANTS[name], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_pair"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Batch:
    source_images: np.ndarray
    source_labels: np.ndarray  # int [N, H, W]
    target_images: list[np.ndarray]
    target_pseudo: list[np.ndarray]  # int [N, H, W] per target

    @property
    def num_targets(self) -> int:
        return len(self.target_images)


@dataclass
class LossBreakdown:
    seg_source: float = 0.0
    kd: dict = field(default_factory=dict)  # i -> value
    pl_rectified: dict = field(default_factory=dict)  # i -> value
    pl_sty_rectified: dict = field(default_factory=dict)  # (i, j) -> value
    cst: dict = field(default_factory=dict)  # (i, j) -> value
    mean_rect_weight: dict = field(default_factory=dict)  # i -> value
    kd_coef: float = 1.0
    pair_coef: float = 0.0
    total: float = 0.0

    def recompose(self) -> float:
        total = self.seg_source
        for i in self.pl_rectified:
            pair = sum(self.pl_sty_rectified.get((i, j), 0.0) + self.cst.get((i, j), 0.0) for j in self.pl_rectified if j != i)
            total += self.kd_coef * self.kd[i] + self.pl_rectified[i] + self.pair_coef * pair
        return total

    def rows(self, iteration: int, domain_ids: list[str]) -> list[dict]:
        out = []
        m = len(self.pl_rectified)
        for i in range(m):
            others = [j for j in range(m) if j != i]
            mean = (lambda d: float(np.mean([d.get((i, j), 0.0) for j in others])) if others else 0.0)
            out.append(
                {
                    "iteration": iteration,
                    "domain": domain_ids[i],
                    "loss_total": self.total,
                    "loss_seg": self.seg_source,
                    "loss_kd": self.kd[i],
                    "loss_pl": self.pl_rectified[i],
                    "loss_pl_sty": mean(self.pl_sty_rectified),
                    "loss_cst": mean(self.cst),
                    "mean_rect_weight": self.mean_rect_weight[i],
                }
            )
        return out


def _pair_forward(bundle: ModelBundle, taps_i: dict, taps_j: dict, head, training: bool, rng) -> Tensor:
    """Prediction of head ``head`` on domain i's features restyled with domain j's statistics."""
    first = min(taps_i)
    feats, _ = bundle.encode(None, training, rng, style_taps=taps_j, resume=(first, taps_i[first]))
    return bundle.classify(feats, head)


def total_objective(
    bundle: ModelBundle,
    batch: Batch,
    config: TrainConfig,
    training: bool = True,
    rng: np.random.Generator | None = None,
    share_cross: bool = True,
) -> tuple[Tensor, LossBreakdown]:
    """Source supervision of every head plus, per target i, KD / M, the rectified
    PL loss, and lambda / (M - 1) times the pairwise stylized-PL and consistency terms.

    With ``share_cross=False`` each pairwise term recomputes its own stylized
    prediction (only meaningful in eval mode, where forwards are deterministic).
    """
    m = bundle.num_targets
    if batch.num_targets != m or len(batch.target_pseudo) != m:
        raise ValueError(f"expected one target batch and pseudo-label batch per domain ({m})")
    k = bundle.config.num_classes
    dtype = bundle.config.dtype
    if training and rng is None:
        raise ValueError("training-mode objective needs an rng for dropout")
    bd = LossBreakdown(kd_coef=1.0 / m, pair_coef=config.lambda_pair / (m - 1) if m > 1 else 0.0)

    xs = bundle.as_input(batch.source_images.astype(dtype))
    feats_s, _ = bundle.encode(xs, training, rng)
    y_s = np.eye(k, dtype=dtype)[batch.source_labels].transpose(0, 3, 1, 2)
    seg = None
    for head in bundle.head_names:
        term = softmax_cross_entropy(bundle.classify(feats_s, head, logits=True), y_s)
        seg = term if seg is None else seg + term
    bd.seg_source = seg.item()
    total = seg

    xt = [bundle.as_input(x.astype(dtype)) for x in batch.target_images]
    feats, taps, preds = [], [], []
    for i in range(m):
        f, t = bundle.encode(xt[i], training, rng)
        feats.append(f)
        taps.append(t)
        preds.append(bundle.classify(f, i))

    pairs = [(i, j) for i in range(m) for j in range(m) if i != j] if config.crossdonorm else []
    cross = {(i, j): _pair_forward(bundle, taps[i], taps[j], j, training, rng) for i, j in pairs}

    def cross_pred(i, j):
        return cross[(i, j)] if share_cross else _pair_forward(bundle, taps[i], taps[j], j, training, rng)

    for i in range(m):
        pl_i = batch.target_pseudo[i]
        others = [j for j in range(m) if j != i]
        if config.rectification and others:
            w = rectification_weight(preds[i], [cross_pred(i, j) for j in others], config.gamma).w.data
        else:
            w = np.ones(preds[i].shape[:1] + preds[i].shape[2:], dtype=dtype)
        bd.mean_rect_weight[i] = float(w.mean())

        # the agnostic head sees detached features: only its own weights learn from KD
        p_agn = bundle.classify(feats[i].detach(), AGNOSTIC)
        teacher = preds[i].detach() if config.kd_mode == "soft" else pl_i
        kd = kd_loss(p_agn, teacher, config.kd_mode)
        pl = rectified_pl_loss(preds[i], pl_i, w)
        bd.kd[i], bd.pl_rectified[i] = kd.item(), pl.item()
        total = total + bd.kd_coef * kd + pl

        pair_sum = None
        for j in others if config.crossdonorm else []:
            sty = rectified_cross_pl_loss(cross_pred(i, j), pl_i, w)
            bd.pl_sty_rectified[(i, j)] = sty.item()
            term = sty
            if config.consistency:
                cst = consistency_loss(cross_pred(i, j), preds[i])
                bd.cst[(i, j)] = cst.item()
                term = term + cst
            else:
                bd.cst[(i, j)] = 0.0
            pair_sum = term if pair_sum is None else pair_sum + term
        if pair_sum is not None:
            total = total + bd.pair_coef * pair_sum
    bd.total = total.item()
    return total, bd


# -- augmentation ---------------------------------------------------------

def augment_batch(rng: np.random.Generator, images: np.ndarray, labels: np.ndarray | None, config: TrainConfig):
    """Random crop + horizontal flip on image and label alike; photometric jitter on the image only."""
    n, _, h, w = images.shape
    crop = config.crop_size or h
    crop = min(crop, h, w)
    out_img = np.empty((n, images.shape[1], crop, crop), dtype=images.dtype)
    out_lab = None if labels is None else np.empty((n, crop, crop), dtype=labels.dtype)
    for s in range(n):
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        flip = bool(config.flip and rng.random() < 0.5)
        img = images[s, :, top : top + crop, left : left + crop]
        lab = None if labels is None else labels[s, top : top + crop, left : left + crop]
        if flip:
            img = img[..., ::-1]
            lab = None if lab is None else lab[..., ::-1]
        if config.jitter > 0:
            contrast = 1.0 + rng.uniform(-config.jitter, config.jitter)
            brightness = rng.uniform(-config.jitter, config.jitter)
            img = np.clip(img * contrast + brightness, 0.0, 1.0)
        out_img[s] = img
        if out_lab is not None:
            out_lab[s] = lab
    return out_img, out_lab


def make_batch(
    rng: np.random.Generator,
    source: DomainDataset,
    targets: list[DomainDataset],
    bank: PseudoLabelBank,
    config: TrainConfig,
) -> Batch:
    src_idx = sample_indices(rng, len(source), config.batch_size)
    xs, ys = source.images[src_idx], source.labels[src_idx]
    xt, pt = [], []
    for i, ds in enumerate(targets):
        idx = sample_indices(rng, len(ds), config.batch_size)
        xt.append(ds.images[idx])
        pt.append(bank.lookup(i, idx))
    if config.augment:
        xs, ys = augment_batch(rng, xs, ys, config)
        aug = [augment_batch(rng, x, p, config) for x, p in zip(xt, pt)]
        xt, pt = [a[0] for a in aug], [a[1] for a in aug]
    return Batch(xs, ys.astype(np.int64), xt, [p.astype(np.int64) for p in pt])


# -- loops ----------------------------------------------------------------

def selftrain_run(
    bundle: ModelBundle,
    source: DomainDataset,
    targets: list[DomainDataset],
    bank: PseudoLabelBank | None,
    config: TrainConfig,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[ModelBundle, list[dict], PseudoLabelBank]:
    """SGD on the cooperative objective; pseudo-labels refreshed every ``n_b`` iterations."""
    if len(targets) != bundle.num_targets:
        raise ValueError(f"bundle has {bundle.num_targets} target heads but {len(targets)} target datasets were given")
    bank = bank if bank is not None else PseudoLabelBank(refresh_every=config.n_b)
    bank.refresh_every = config.n_b
    opt = SGD(bundle.parameters(bundle.segmentation_owners()), config.lr, config.momentum, config.weight_decay)
    domain_ids = [t.domain_id for t in targets]
    rows: list[dict] = []
    last: LossBreakdown | None = None
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for it in range(config.iterations):
        if bank.is_due(it):
            refresh_pseudo_labels(bundle, targets, bank, it)
        batch = make_batch(step_rng(config.seed, it, 0), source, targets, bank, config)
        bundle.zero_grad()
        try:
            loss, bd = total_objective(bundle, batch, config, training=True, rng=step_rng(config.seed, it, 1))
        except NormalizationError as exc:
            # NaN weights surface as non-normalized predictions before any loss exists
            raise TrainingDivergedError(f"non-finite predictions at iteration {it}: {exc}", last) from exc
        if not np.isfinite(bd.total):
            raise TrainingDivergedError(f"non-finite stage-2 loss at iteration {it}", bd)
        last = bd
        loss.backward()
        opt.step()
        rows.extend(bd.rows(it, domain_ids))
        if config.checkpoint_every and checkpoint_dir is not None and (it + 1) % config.checkpoint_every == 0:
            bundle.save(Path(checkpoint_dir) / f"selftrain_{it + 1:06d}.ckpt")
        if it % 100 == 0:
            logger.info("selftrain it=%d total=%.4f", it, bd.total)
    bundle.zero_grad()
    if metrics_path is not None:
        write_csv(metrics_path, METRICS_CSV_HEADER, rows)
    if checkpoint_dir is not None:
        bundle.save(Path(checkpoint_dir) / "selftrain_final.ckpt")
    return bundle, rows, bank


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    return replace(base, **VARIANTS[name])
