"""Pseudo-label bank, cooperative rectification weights and the stage-2 losses."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, cross_entropy, kl_divergence, kl_map, no_grad, one_hot
from .data import DomainDataset, load_labels, save_labels

KD_MODES = ("soft", "hard")


@dataclass
class PseudoLabelBank:
    """Hard per-pixel pseudo-labels for every target sample, keyed by target index."""

    refresh_every: int = 200
    labels: dict[int, np.ndarray] = field(default_factory=dict)  # uint8 [N, H, W]
    domain_ids: dict[int, str] = field(default_factory=dict)
    last_refresh_iteration: int | None = None
    refresh_count: int = 0

    def is_due(self, iteration: int) -> bool:
        if self.last_refresh_iteration is None or not self.labels:
            return True
        return self.refresh_every > 0 and iteration - self.last_refresh_iteration >= self.refresh_every

    def lookup(self, domain: int, indices) -> np.ndarray:
        return self.labels[domain][indices]

    def export(self, directory: str | Path) -> Path:
        directory = Path(directory)
        manifest = {"last_refresh_iteration": self.last_refresh_iteration, "refresh_every": self.refresh_every, "domains": []}
        for i, lab in sorted(self.labels.items()):
            sub = f"pl_{i}"
            names = save_labels(lab, directory / sub)
            manifest["domains"].append(
                {"index": i, "domain_id": self.domain_ids.get(i, str(i)), "dir": sub, "shape": list(lab.shape), "labels": names}
            )
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "PseudoLabelBank":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        bank = cls(refresh_every=manifest["refresh_every"], last_refresh_iteration=manifest["last_refresh_iteration"])
        for d in manifest["domains"]:
            _, h, w = d["shape"]
            bank.labels[d["index"]] = load_labels(directory / d["dir"], d["labels"], h, w)
            bank.domain_ids[d["index"]] = d["domain_id"]
        return bank


def pseudo_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over the class axis; exact ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=1).astype(np.uint8)


def refresh_pseudo_labels(
    bundle, targets: list[DomainDataset], bank: PseudoLabelBank, iteration: int = 0, batch_size: int = 50
) -> PseudoLabelBank:
    """Relabel every target sample with its own domain head, in eval mode.

    The new labels are built aside and swapped in at once.
    """
    fresh: dict[int, np.ndarray] = {}
    with no_grad():
        for i, ds in enumerate(targets):
            chunks = []
            for s in range(0, len(ds), batch_size):
                p = bundle.forward(ds.images[s : s + batch_size].astype(bundle.config.dtype), i)
                chunks.append(pseudo_labels(p.data))
            fresh[i] = np.concatenate(chunks)
            bank.domain_ids[i] = ds.domain_id
    bank.labels = fresh
    bank.last_refresh_iteration = iteration
    bank.refresh_count += 1
    return bank


@dataclass
class RectificationWeights:
    w: Tensor  # [N, H, W], constant
    gamma: float

    @property
    def mean(self) -> float:
        return float(self.w.data.mean())


def rectification_weight(p_i: Tensor, cross_preds: list[Tensor], gamma: float = 1.0) -> RectificationWeights:
    """Mean over j of exp(-gamma * KL(p_i || p_{i->j})), per pixel, off the tape."""
    if not cross_preds:
        raise ValueError("rectification needs at least one cross-domain prediction")
    with no_grad():
        p = p_i.detach()
        acc = np.zeros(p.shape[:1] + p.shape[2:], dtype=p.dtype)
        for q in cross_preds:
            acc += np.exp(-gamma * kl_map(p, q.detach()).data)
        w = acc / len(cross_preds)
    # exp can underflow for huge gamma; the weight must stay strictly positive
    w = np.maximum(w, np.finfo(w.dtype).tiny)
    return RectificationWeights(Tensor(w), gamma)


def _targets(labels, k: int, dtype) -> np.ndarray:
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if labels.ndim == 3:
        return one_hot(labels, k, dtype)
    return labels


def _weights(w):
    if w is None:
        return None
    if isinstance(w, RectificationWeights):
        return w.w.data
    return w.data if isinstance(w, Tensor) else np.asarray(w)


def rectified_pl_loss(p_i: Tensor, pl, w=None) -> Tensor:
    """Pixel-weighted CE of a prediction against its pseudo-label; weights carry no gradient."""
    return cross_entropy(p_i, _targets(pl, p_i.shape[1], p_i.dtype), _weights(w))


def rectified_cross_pl_loss(p_ij: Tensor, pl_i, w_i=None) -> Tensor:
    """CE of the stylized prediction p_{i->j} against domain i's pseudo-label, weighted by w_i."""
    return cross_entropy(p_ij, _targets(pl_i, p_ij.shape[1], p_ij.dtype), _weights(w_i))


def consistency_loss(p_ij: Tensor, p_i: Tensor) -> Tensor:
    """KL(p_{i->j} || p_i) with the original-view prediction as a fixed teacher."""
    return kl_divergence(p_ij, p_i.detach())


def kd_loss(p_agnostic: Tensor, teacher, mode: str = "soft") -> Tensor:
    """Distil a domain head into the agnostic head.

    soft: KL(p_agnostic || teacher probabilities); hard: CE against the
    teacher's hard labels (integer [N,H,W] or one-hot).
    """
    if mode not in KD_MODES:
        raise ValueError(f"unknown KD mode {mode!r}; expected one of {KD_MODES}")
    if mode == "soft":
        t = teacher.detach() if isinstance(teacher, Tensor) else Tensor(np.asarray(teacher, dtype=p_agnostic.dtype))
        return kl_divergence(p_agnostic, t)
    if isinstance(teacher, Tensor) and teacher.ndim == 4 and not np.all((teacher.data == 0) | (teacher.data == 1)):
        teacher = pseudo_labels(teacher.data)
    return cross_entropy(p_agnostic, _targets(teacher, p_agnostic.shape[1], p_agnostic.dtype))
