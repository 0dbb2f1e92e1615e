"""Procedural multi-domain segmentation scenes.

Every domain renders scenes from one shared scene distribution; domains
differ only by a global photometric transform (per-channel gain and bias,
a gamma curve, additive noise). Labels never depend on the domain.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# base colors in canonical appearance space; index 0 is the background
PALETTE = np.array(
    [
        [0.45, 0.45, 0.45],
        [0.78, 0.32, 0.30],
        [0.30, 0.66, 0.36],
        [0.34, 0.40, 0.78],
        [0.80, 0.76, 0.30],
        [0.62, 0.36, 0.72],
        [0.30, 0.72, 0.72],
        [0.92, 0.56, 0.20],
    ]
)
# stripe frequency (radians / pixel) of each class texture
TEXTURE_FREQ = np.array([0.0, 0.9, 1.6, 2.3, 1.2, 2.0, 0.6, 2.6])

FORMAT_VERSION = 1


class DuplicateDomainError(ValueError):
    pass


@dataclass
class Scene:
    label_map: np.ndarray  # uint8 [H, W]
    canonical_image: np.ndarray  # float32 [3, H, W] in [0, 1]
    seed: int

    @property
    def num_pixels(self) -> int:
        return self.label_map.size


@dataclass
class DomainSpec:
    domain_id: str
    gain: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bias: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gamma: float = 1.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.gain = tuple(float(g) for g in self.gain)
        self.bias = tuple(float(b) for b in self.bias)
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ValueError("gain and bias need one value per color channel")
        if min(self.gain) <= 0:
            raise ValueError("gains must be positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    @classmethod
    def identity(cls, domain_id: str = "identity") -> "DomainSpec":
        return cls(domain_id)


def generate_scene(
    seed: int,
    H: int = 32,
    W: int = 32,
    K: int = 4,
    shapes_per_class: tuple[int, int] = (2, 4),
    texture_amplitude: float = 0.05,
) -> Scene:
    """Random rectangles (odd classes) and disks (even classes) over class 0."""
    if K < 2:
        raise ValueError("need at least two classes")
    if K > len(PALETTE):
        raise ValueError(f"K={K} exceeds the palette size {len(PALETTE)}")
    if H < 8 or W < 8:
        raise ValueError("scenes must be at least 8x8")
    lo, hi = shapes_per_class
    rng = np.random.default_rng(seed)
    labels = np.zeros((H, W), dtype=np.uint8)
    yy, xx = np.mgrid[0:H, 0:W]

    shapes = []
    for cls in range(1, K):
        shapes += [cls] * int(rng.integers(lo, hi + 1))
    rng.shuffle(shapes)
    side = min(H, W)
    for cls in shapes:
        if cls % 2 == 1:
            h = int(rng.integers(max(2, side // 8), side // 3 + 1))
            w = int(rng.integers(max(2, side // 8), side // 3 + 1))
            top = int(rng.integers(0, H - h + 1))
            left = int(rng.integers(0, W - w + 1))
            labels[top : top + h, left : left + w] = cls
        else:
            r = rng.uniform(side / 10, side / 5)
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            labels[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls

    phase = rng.uniform(0, 2 * np.pi, size=K)
    texture = texture_amplitude * np.sin(TEXTURE_FREQ[labels] * (xx + yy) + phase[labels])
    grain = rng.normal(0.0, texture_amplitude / 3, size=(3, H, W))
    image = PALETTE[labels].transpose(2, 0, 1) + texture[None] + grain
    return Scene(labels, np.clip(image, 0.0, 1.0).astype(np.float32), int(seed))


def render_domain(scene: Scene, spec: DomainSpec) -> np.ndarray:
    """clip(gain * canonical**gamma + bias + noise, 0, 1) as float32 [3, H, W]."""
    canon = scene.canonical_image.astype(np.float64)
    gain = np.asarray(spec.gain).reshape(3, 1, 1)
    bias = np.asarray(spec.bias).reshape(3, 1, 1)
    out = gain * canon**spec.gamma + bias
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.seed, scene.seed])
        out = out + rng.normal(0.0, spec.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


@dataclass
class DomainDataset:
    domain_id: str
    images: np.ndarray  # float32 [N, 3, H, W]
    labels: np.ndarray | None  # uint8 [N, H, W]
    is_source: bool = False
    spec: DomainSpec | None = None
    scene_seeds: list[int] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.is_source and self.labels is None:
            raise ValueError("a source dataset needs labels")
        if self.labels is not None and self.labels.shape != self.images.shape[:1] + self.images.shape[2:]:
            raise ValueError("labels do not match image shapes")

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, idx: int):
        return self.images[idx], None if self.labels is None else self.labels[idx]

    def __iter__(self) -> Iterator:
        return (self[i] for i in range(len(self)))

    @property
    def samples(self) -> list:
        return list(self)

    @property
    def hw(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[3]


def build_dataset(
    spec: DomainSpec,
    scene_seeds: Sequence[int],
    H: int,
    W: int,
    K: int,
    keep_labels: bool,
    is_source: bool = False,
    split: str = "train",
    shapes_per_class: tuple[int, int] = (2, 4),
) -> DomainDataset:
    scenes = [generate_scene(s, H, W, K, shapes_per_class) for s in scene_seeds]
    images = np.stack([render_domain(sc, spec) for sc in scenes]) if scenes else np.zeros((0, 3, H, W), np.float32)
    labels = np.stack([sc.label_map for sc in scenes]) if scenes else np.zeros((0, H, W), np.uint8)
    return DomainDataset(
        spec.domain_id,
        images,
        labels if keep_labels else None,
        is_source=is_source,
        spec=spec,
        scene_seeds=list(map(int, scene_seeds)),
        split=split,
    )


# Desk presets: the source is near-canonical; each target and the unseen domain
# costs a source-only model roughly 8-20 mIoU points without wiping out any class.
PRESET_SPECS = {
    "source": DomainSpec("source", (1.0, 1.0, 1.0), (0.0, 0.0, 0.0), 1.0, 0.02, seed=11),
    "T1": DomainSpec("T1", (1.10, 0.70, 1.00), (0.00, 0.05, 0.00), 1.1, 0.04, seed=23),
    "T2": DomainSpec("T2", (0.70, 0.70, 0.70), (0.20, 0.20, 0.20), 0.8, 0.04, seed=37),
    "T3": DomainSpec("T3", (1.25, 0.90, 0.60), (-0.08, 0.05, 0.15), 1.2, 0.03, seed=41),
    "unseen": DomainSpec("unseen", (0.60, 0.72, 0.85), (0.20, 0.15, 0.10), 0.9, 0.04, seed=53),
}


def random_spec(domain_id: str, rng: np.random.Generator) -> DomainSpec:
    return DomainSpec(
        domain_id,
        tuple(rng.uniform(0.5, 1.3, 3)),
        tuple(rng.uniform(-0.1, 0.3, 3)),
        float(rng.uniform(0.6, 1.7)),
        float(rng.uniform(0.01, 0.05)),
        seed=int(rng.integers(0, 2**31)),
    )


@dataclass
class BenchmarkConfig:
    seed: int = 0
    num_targets: int = 2
    H: int = 32
    W: int = 32
    K: int = 4
    n_source: int = 400
    n_target: int = 300
    n_unseen: int = 100
    n_eval: int = 100
    shapes_per_class: tuple[int, int] = (2, 4)
    specs: list[DomainSpec] | None = None  # source, targets..., unseen

    def domain_specs(self) -> list[DomainSpec]:
        if self.specs is not None:
            if len(self.specs) != self.num_targets + 2:
                raise ValueError("specs must list source, every target, then the unseen domain")
            return list(self.specs)
        rng = np.random.default_rng([self.seed, 7919])
        targets = []
        for i in range(self.num_targets):
            name = f"T{i + 1}"
            targets.append(PRESET_SPECS[name] if name in PRESET_SPECS else random_spec(name, rng))
        return [PRESET_SPECS["source"], *targets, PRESET_SPECS["unseen"]]


@dataclass
class Benchmark:
    source: DomainDataset
    targets: list[DomainDataset]
    unseen: DomainDataset
    target_eval: list[DomainDataset]
    config: BenchmarkConfig

    @property
    def num_targets(self) -> int:
        return len(self.targets)

    def __iter__(self):
        # (source, targets, unseen) unpacking
        return iter((self.source, self.targets, self.unseen))


def _scene_seeds(seed: int, domain_index: int, split_index: int, count: int) -> list[int]:
    base = ((seed * 64 + domain_index) * 4 + split_index) * 1_000_000
    return [base + i for i in range(count)]


def make_benchmark(config: BenchmarkConfig | None = None) -> Benchmark:
    """Labeled source, M unlabeled targets (plus labeled eval splits), and a held-out domain."""
    config = config or BenchmarkConfig()
    if config.num_targets < 1:
        raise ValueError("need at least one target domain")
    specs = config.domain_specs()
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise DuplicateDomainError(f"duplicate domain ids in {ids}")
    shape = dict(H=config.H, W=config.W, K=config.K, shapes_per_class=tuple(config.shapes_per_class))

    source = build_dataset(specs[0], _scene_seeds(config.seed, 0, 0, config.n_source), keep_labels=True, is_source=True, **shape)
    targets, evals = [], []
    for i, spec in enumerate(specs[1:-1], start=1):
        targets.append(build_dataset(spec, _scene_seeds(config.seed, i, 0, config.n_target), keep_labels=False, **shape))
        evals.append(build_dataset(spec, _scene_seeds(config.seed, i, 1, config.n_eval), keep_labels=True, split="eval", **shape))
    unseen = build_dataset(specs[-1], _scene_seeds(config.seed, len(specs) - 1, 1, config.n_unseen), keep_labels=True, split="eval", **shape)
    return Benchmark(source, targets, unseen, evals, config)


# -- on-disk format -------------------------------------------------------

def save_labels(labels: np.ndarray, directory: Path) -> list[str]:
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, lab in enumerate(labels):
        name = f"{i:05d}.u8"
        (directory / name).write_bytes(np.ascontiguousarray(lab, dtype=np.uint8).tobytes())
        names.append(name)
    return names


def load_labels(directory: Path, names: Sequence[str], H: int, W: int) -> np.ndarray:
    return np.stack([np.frombuffer((directory / n).read_bytes(), dtype=np.uint8).reshape(H, W) for n in names])


def save_dataset(ds: DomainDataset, directory: str | Path) -> Path:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(ds.images):
        name = f"{i:05d}.f32"
        (directory / "images" / name).write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
        names.append(name)
    label_names = save_labels(ds.labels, directory / "labels") if ds.labels is not None else None
    n, c, h, w = ds.images.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "domain_id": ds.domain_id,
        "split": ds.split,
        "is_source": ds.is_source,
        "shape": {"N": n, "C": c, "H": h, "W": w},
        "scene_seeds": ds.scene_seeds,
        "spec": asdict(ds.spec) if ds.spec is not None else None,
        "images": names,
        "labels": label_names,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_dataset(directory: str | Path) -> DomainDataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {manifest.get('format_version')}")
    shp = manifest["shape"]
    c, h, w = shp["C"], shp["H"], shp["W"]
    if manifest["images"]:
        images = np.stack(
            [np.frombuffer((directory / "images" / n).read_bytes(), dtype="<f4").reshape(c, h, w) for n in manifest["images"]]
        ).astype(np.float32)
    else:
        images = np.zeros((0, c, h, w), np.float32)
    labels = None
    if manifest["labels"] is not None:
        labels = load_labels(directory / "labels", manifest["labels"], h, w) if manifest["labels"] else np.zeros((0, h, w), np.uint8)
    spec = DomainSpec(**manifest["spec"]) if manifest["spec"] else None
    return DomainDataset(
        manifest["domain_id"],
        images,
        labels,
        is_source=manifest["is_source"],
        spec=spec,
        scene_seeds=manifest["scene_seeds"],
        split=manifest["split"],
    )


def save_benchmark(bench: Benchmark, directory: str | Path) -> Path:
    directory = Path(directory)
    entries = {"source": save_dataset(bench.source, directory / "source").name}
    entries["targets"] = [save_dataset(t, directory / f"target_{t.domain_id}").name for t in bench.targets]
    entries["target_eval"] = [save_dataset(t, directory / f"eval_{t.domain_id}").name for t in bench.target_eval]
    entries["unseen"] = save_dataset(bench.unseen, directory / "unseen").name
    cfg = asdict(bench.config)
    cfg["specs"] = [asdict(s) for s in bench.config.domain_specs()]
    (directory / "benchmark.json").write_text(json.dumps({"format_version": FORMAT_VERSION, "config": cfg, "datasets": entries}, indent=2))
    return directory


def load_benchmark(directory: str | Path) -> Benchmark:
    directory = Path(directory)
    meta = json.loads((directory / "benchmark.json").read_text())
    cfg = dict(meta["config"])
    cfg["specs"] = [DomainSpec(**s) for s in cfg["specs"]]
    cfg["shapes_per_class"] = tuple(cfg["shapes_per_class"])
    entries = meta["datasets"]
    return Benchmark(
        load_dataset(directory / entries["source"]),
        [load_dataset(directory / n) for n in entries["targets"]],
        load_dataset(directory / entries["unseen"]),
        [load_dataset(directory / n) for n in entries["target_eval"]],
        BenchmarkConfig(**cfg),
    )
