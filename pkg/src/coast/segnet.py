"""Shared encoder, per-domain and domain-agnostic heads, per-domain discriminators."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import Tensor, conv2d, downsample_nearest, dropout, leaky_relu, relu, softmax, upsample_nearest
from .crossdonorm import stylize_toward

AGNOSTIC = "A"
CHECKPOINT_MAGIC = b"COAST"
CHECKPOINT_VERSION = 1


class UnknownHeadError(KeyError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (16, 32, 32)
    dropout: float = 0.1
    taps: tuple[int, ...] = (0,)
    # blocks whose output is nearest-downsampled by 2 before the next block
    downsample_after: tuple[int, ...] = (0,)
    in_channels: int = 3

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.taps = tuple(sorted(self.taps))
        self.downsample_after = tuple(self.downsample_after)
        if not self.widths:
            raise ValueError("encoder needs at least one block")
        if any(t < 0 or t >= self.num_blocks for t in self.taps):
            raise ValueError(f"tap indices must be < {self.num_blocks}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    @property
    def output_stride(self) -> int:
        return 2 ** len(self.downsample_after)


@dataclass
class ModelConfig:
    num_targets: int = 2
    num_classes: int = 4
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    disc_widths: tuple[int, ...] = (16, 32)
    detach_style: bool = False
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.disc_widths = tuple(self.disc_widths)
        if self.num_targets < 1:
            raise ValueError("need at least one target domain")


def _kaiming(rng: np.random.Generator, out_c: int, in_c: int, k: int, dtype) -> Tensor:
    fan_in = in_c * k * k
    w = rng.standard_normal((out_c, in_c, k, k)) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def _zeros(n: int, dtype) -> Tensor:
    return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)


class ModelBundle:
    """Encoder, M+1 classifier heads and M discriminators with owner-partitioned parameters.

    Owners are ``encoder``, ``cls_<i>`` for target head i, ``cls_A`` for the
    domain-agnostic head, and ``disc_<i>`` for discriminator i.
    """

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        cfg = self.config
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, dict[str, Tensor]] = {}

        enc = {}
        in_c = cfg.encoder.in_channels
        for b, width in enumerate(cfg.encoder.widths):
            enc[f"conv{b}.weight"] = _kaiming(rng, width, in_c, 3, dtype)
            enc[f"conv{b}.bias"] = _zeros(width, dtype)
            in_c = width
        self.params["encoder"] = enc
        self.feature_channels = in_c

        for head in self.head_names:
            self.params[self.head_owner(head)] = {
                "weight": _kaiming(rng, cfg.num_classes, in_c, 1, dtype),
                "bias": _zeros(cfg.num_classes, dtype),
            }
        for i in range(cfg.num_targets):
            disc = {}
            widths = (*cfg.disc_widths, 1)
            c = cfg.num_classes
            for layer, width in enumerate(widths):
                disc[f"conv{layer}.weight"] = _kaiming(rng, width, c, 3, dtype)
                disc[f"conv{layer}.bias"] = _zeros(width, dtype)
                c = width
            self.params[f"disc_{i}"] = disc

    # -- registry ---------------------------------------------------------
    @property
    def num_targets(self) -> int:
        return self.config.num_targets

    @property
    def head_names(self) -> list:
        return [*range(self.config.num_targets), AGNOSTIC]

    @staticmethod
    def head_owner(head) -> str:
        return f"cls_{head}"

    @property
    def owners(self) -> list[str]:
        return list(self.params)

    def check_head(self, head):
        if head not in self.head_names:
            raise UnknownHeadError(f"unknown classifier head {head!r}; expected one of {self.head_names}")
        return head

    def parameters(self, owners=None) -> list[Tensor]:
        if owners is None:
            owners = self.owners
        elif isinstance(owners, str):
            owners = [owners]
        return [t for o in owners for t in self.params[o].values()]

    def named_parameters(self):
        for owner, group in self.params.items():
            for name, t in group.items():
                yield owner, name, t

    def segmentation_owners(self) -> list[str]:
        return ["encoder", *(self.head_owner(h) for h in self.head_names)]

    def discriminator_owners(self) -> list[str]:
        return [f"disc_{i}" for i in range(self.num_targets)]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def digest(self, owners=None) -> str:
        h = hashlib.sha256()
        for owner in owners or self.owners:
            for name, t in self.params[owner].items():
                h.update(f"{owner}/{name}".encode())
                h.update(t.data.tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelBundle":
        other = ModelBundle.__new__(ModelBundle)
        other.config = self.config
        other.feature_channels = self.feature_channels
        other.params = {o: {n: Tensor(t.data.copy(), requires_grad=True) for n, t in g.items()} for o, g in self.params.items()}
        return other

    # -- forward ----------------------------------------------------------
    def as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.config.dtype))

    def encode(self, x, training: bool = False, rng=None, style_taps: dict | None = None, resume: tuple | None = None):
        """Run the encoder; returns (features, {tap: pre-stylization features}).

        ``style_taps`` maps tap index -> feature map whose statistics replace
        this input's statistics at that tap. ``resume=(block, z)`` starts from
        the already-computed (unstylized) output ``z`` of ``block``.
        """
        cfg = self.config.encoder
        enc = self.params["encoder"]
        taps: dict[int, Tensor] = {}
        h = None if resume is not None else self.as_input(x)
        start = 0 if resume is None else resume[0]
        last = cfg.num_blocks - 1
        for b in range(start, cfg.num_blocks):
            if resume is not None and b == resume[0]:
                h = resume[1]
            else:
                h = relu(conv2d(h, enc[f"conv{b}.weight"], enc[f"conv{b}.bias"]))
            if b in cfg.taps:
                taps[b] = h
                if style_taps is not None and b in style_taps:
                    h = stylize_toward(h, style_taps[b], self.config.detach_style)
            if b in cfg.downsample_after:
                h = downsample_nearest(h, 2)
            if b == last:
                h = dropout(h, cfg.dropout, training, rng)
        return h, taps

    def classify(self, features: Tensor, head, logits: bool = False) -> Tensor:
        p = self.params[self.head_owner(self.check_head(head))]
        out = upsample_nearest(conv2d(features, p["weight"], p["bias"]), self.config.encoder.output_stride)
        return out if logits else softmax(out, axis=1)

    def forward(self, x, head=AGNOSTIC, style_source=None, training: bool = False, rng=None, logits: bool = False) -> Tensor:
        """Per-pixel class probabilities [N, K, H, W] from one head.

        With ``style_source`` the features at every configured tap are
        re-normalized with the style source's statistics at that tap.
        """
        self.check_head(head)
        x = self.as_input(x)
        style_taps = None
        if style_source is not None:
            style_source = self.as_input(style_source)
            if style_source.shape != x.shape:
                raise ValueError(f"style source shape {style_source.shape} differs from input {x.shape}")
            _, style_taps = self.encode(style_source, training, rng)
        feats, _ = self.encode(x, training, rng, style_taps=style_taps)
        return self.classify(feats, head, logits)

    __call__ = forward

    def discriminate(self, p: Tensor, domain_index: int) -> Tensor:
        """Patch logits (source = 1) from the domain discriminator ``domain_index``."""
        if not (isinstance(domain_index, (int, np.integer)) and 0 <= domain_index < self.num_targets):
            raise UnknownHeadError(f"invalid discriminator index {domain_index!r}")
        disc = self.params[f"disc_{domain_index}"]
        n_layers = len(self.config.disc_widths) + 1
        h = p
        for layer in range(n_layers):
            h = conv2d(h, disc[f"conv{layer}.weight"], disc[f"conv{layer}.bias"], stride=2, padding=1)
            if layer < n_layers - 1:
                h = leaky_relu(h, 0.2)
        return h

    # -- checkpoints ------------------------------------------------------
    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)

    def load(self, path: str | Path) -> "ModelBundle":
        load_checkpoint(self, path)
        return self


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    """Binary layout: b"COAST", u32 version, u32 count, then per parameter:
    owner, name (u32 length + utf-8), u32 ndim, u32 dims, float64 LE values."""
    entries = list(bundle.named_parameters())
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for owner, name, t in entries:
        chunks += [_pack_str(owner), _pack_str(name), struct.pack("<I", t.ndim)]
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> dict[tuple[str, str], np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    def read_str():
        nonlocal pos
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        s = buf[pos : pos + n].decode("utf-8")
        pos += n
        return s

    out = {}
    for _ in range(count):
        owner, name = read_str(), read_str()
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[(owner, name)] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(buf):
        raise CheckpointError("trailing bytes after the last parameter")
    return out


def load_checkpoint(bundle: ModelBundle, path: str | Path) -> None:
    stored = read_checkpoint(path)
    expected = {(o, n): t for o, n, t in bundle.named_parameters()}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(f"parameter mismatch; missing={missing[:3]} unexpected={extra[:3]}")
    for key, t in expected.items():
        arr = stored[key]
        if arr.shape != t.shape:
            raise CheckpointError(f"shape mismatch for {key}: {arr.shape} vs {t.shape}")
        t.data = arr.astype(t.dtype)
        t.grad = None
