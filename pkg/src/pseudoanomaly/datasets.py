"""One-class splits, image normalization and anomaly-guaranteed batch composition."""

from __future__ import annotations

import gzip
import json
import logging
import math
import pickle
import tarfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".webp"}


class ImageFormatError(ValueError):
    """Raised for inputs that are not decodable 1- or 3-channel images."""


class SplitError(ValueError):
    pass


class BatchError(ValueError):
    pass


class IngestionError(ValueError):
    pass


# Normalization #############################################################################


def _as_hwc(raw) -> np.ndarray:
    arr = np.asarray(raw)
    if arr.dtype == object or arr.ndim not in (2, 3):
        raise ImageFormatError(f"expected an (H, W) or (H, W, C) pixel array, got shape {arr.shape}")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] not in (1, 3):
        raise ImageFormatError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    if min(arr.shape[:2]) == 0:
        raise ImageFormatError("zero-dimension image")
    if not np.issubdtype(arr.dtype, np.number):
        raise ImageFormatError(f"non-numeric pixel dtype {arr.dtype}")
    return arr


def normalize_batch(raw: np.ndarray, target_size: int) -> torch.Tensor:
    """Map an (N, H, W, C) array of [0, 255] pixels to an (N, C, S, S) float tensor in [-1, 1].

    Resizing is bilinear and skipped when the input already has the target size,
    so the affine map 0 -> -1, 255 -> +1 is exactly invertible in that case.
    """
    if target_size < 8:
        raise ImageFormatError(f"target_size must be >= 8, got {target_size}")
    arr = np.asarray(raw)
    if arr.ndim != 4 or arr.shape[3] not in (1, 3) or min(arr.shape[1:3]) == 0:
        raise ImageFormatError(f"expected an (N, H, W, C) batch with C in (1, 3), got {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(0, 3, 1, 2)
    if x.shape[-2:] != (target_size, target_size):
        x = F.interpolate(x, size=(target_size, target_size), mode="bilinear", align_corners=False)
    return (x / 127.5 - 1.0).clamp_(-1.0, 1.0).contiguous()


def normalize_image(raw, target_size: int) -> torch.Tensor:
    """Single-image form of :func:`normalize_batch`; returns a (C, S, S) tensor."""
    return normalize_batch(_as_hwc(raw)[None], target_size)[0]


def denormalize_image(x: torch.Tensor) -> np.ndarray:
    """Inverse of the affine map: (C, H, W) in [-1, 1] back to (H, W, C) uint8."""
    pixels = torch.round((x.detach().double() + 1.0) * 127.5).clamp(0, 255)
    return pixels.to(torch.uint8).permute(1, 2, 0).numpy()


# Corpus and splits #########################################################################


@dataclass(eq=False)
class ImageCorpus:
    """Labeled raw images with a fixed train/test partition.

    ``raw`` is (N, H, W, C) uint8. Ids are strings, unique and stable across loads.
    """

    ids: tuple[str, ...]
    raw: np.ndarray
    labels: np.ndarray
    is_test: np.ndarray
    class_names: dict[int, str] = field(default_factory=dict)
    skipped: tuple[str, ...] = ()
    name: str = "corpus"

    def __post_init__(self):
        n = len(self.ids)
        if not (self.raw.shape[0] == len(self.labels) == len(self.is_test) == n):
            raise ValueError("ids, raw, labels and is_test must have equal length")
        if len(set(self.ids)) != n:
            raise ValueError("example ids must be unique")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.is_test = np.asarray(self.is_test, dtype=bool)
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    @property
    def channels(self) -> int:
        return int(self.raw.shape[3])

    @property
    def native_size(self) -> int:
        return int(self.raw.shape[1])

    @property
    def classes(self) -> list[int]:
        return sorted(set(self.labels.tolist()))

    def class_counts(self, test: bool | None = None) -> dict[int, int]:
        mask = np.ones(len(self), bool) if test is None else self.is_test == test
        values, counts = np.unique(self.labels[mask], return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def indices(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self._index[i] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as e:
            raise KeyError(f"unknown example id {e.args[0]!r}") from None

    def images(self, ids: Sequence[str], size: int | None = None) -> torch.Tensor:
        return normalize_batch(self.raw[self.indices(ids)], size or self.native_size)


@dataclass(frozen=True)
class OneClassSplit:
    normal_class: int
    gamma: float
    seed: int
    train_normals: tuple[str, ...]
    train_anomalies: tuple[str, ...]
    test: tuple[tuple[str, int], ...]

    @property
    def achieved_gamma(self) -> float:
        total = len(self.train_normals) + len(self.train_anomalies)
        return len(self.train_anomalies) / total if total else 0.0

    @property
    def test_ids(self) -> list[str]:
        return [i for i, _ in self.test]

    @property
    def test_labels(self) -> np.ndarray:
        return np.array([y for _, y in self.test], dtype=np.int64)

    def summary(self) -> dict:
        labels = self.test_labels
        return {
            "normal_class": self.normal_class,
            "gamma_requested": self.gamma,
            "gamma_achieved": self.achieved_gamma,
            "n_train_normals": len(self.train_normals),
            "n_train_anomalies": len(self.train_anomalies),
            "n_test_normal": int((labels == 0).sum()),
            "n_test_anomalous": int((labels == 1).sum()),
        }

    def to_json(self) -> dict:
        return {
            "normal_class": self.normal_class,
            "gamma": self.gamma,
            "seed": self.seed,
            "train_normals": list(self.train_normals),
            "train_anomalies": list(self.train_anomalies),
            "test": [[i, y] for i, y in self.test],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "OneClassSplit":
        return cls(
            normal_class=int(d["normal_class"]),
            gamma=float(d["gamma"]),
            seed=int(d["seed"]),
            train_normals=tuple(d["train_normals"]),
            train_anomalies=tuple(d["train_anomalies"]),
            test=tuple((str(i), int(y)) for i, y in d["test"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "OneClassSplit":
        return cls.from_json(json.loads(Path(path).read_text()))


def anomaly_count(n_normals: int, gamma: float) -> int:
    """Number of anomalies a such that a / (n + a) is closest to ``gamma`` (round half up)."""
    if not 0.0 <= gamma < 1.0:
        raise SplitError(f"gamma must lie in [0, 1), got {gamma}")
    return int(math.floor(n_normals * gamma / (1.0 - gamma) + 0.5))


def build_one_class_split(corpus: ImageCorpus, normal_class: int, gamma: float, seed: int) -> OneClassSplit:
    if normal_class not in corpus.classes:
        raise SplitError(f"normal_class {normal_class} not present in corpus (classes: {corpus.classes})")
    train = ~corpus.is_test
    ids = np.asarray(corpus.ids, dtype=object)
    normals = ids[train & (corpus.labels == normal_class)].tolist()
    others = ids[train & (corpus.labels != normal_class)].tolist()
    if not normals:
        raise SplitError(f"no training images for normal_class {normal_class}")

    a = anomaly_count(len(normals), gamma)
    if gamma > 0 and not others:
        raise SplitError("gamma > 0 but the corpus has no non-normal training images")
    if a > len(others):
        raise SplitError(f"requested {a} anomalies but only {len(others)} are available (short by {a - len(others)})")
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(others), size=a, replace=False) if a else np.empty(0, dtype=np.int64)
    anomalies = [others[i] for i in np.sort(picked)]

    test_mask = corpus.is_test
    test = tuple(
        (str(i), int(lbl != normal_class)) for i, lbl in zip(ids[test_mask], corpus.labels[test_mask])
    )
    return OneClassSplit(
        normal_class=normal_class,
        gamma=float(gamma),
        seed=int(seed),
        train_normals=tuple(normals),
        train_anomalies=tuple(anomalies),
        test=test,
    )


# Batches ###################################################################################


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 256
    min_anomalies: int = 32

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0 <= self.min_anomalies <= self.batch_size:
            raise ValueError("min_anomalies must lie in [0, batch_size]")


@dataclass(frozen=True)
class Batch:
    ids: tuple[str, ...]
    y: np.ndarray

    def __len__(self):
        return len(self.ids)

    @property
    def n_anomalies(self) -> int:
        return int(self.y.sum())


def anomaly_slots(split: OneClassSplit, spec: BatchSpec) -> int:
    """Anomaly slots per batch: the pool's share of the batch, never below ``min_anomalies``."""
    if split.gamma <= 0 or not split.train_anomalies:
        return 0
    share = int(math.floor(spec.batch_size * split.achieved_gamma + 0.5))
    return min(spec.batch_size, max(spec.min_anomalies, share))


def _draw_anomalies(pool: Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    replace = len(pool) < k
    return [pool[i] for i in rng.choice(len(pool), size=k, replace=replace)]


def compose_batch(split: OneClassSplit, spec: BatchSpec, rng: np.random.Generator) -> Batch:
    """Draw one batch honoring the anomaly guarantee.

    Anomalies are resampled with replacement when the pool is smaller than the
    number of anomaly slots.
    """
    if not split.train_normals:
        raise BatchError("empty normal pool")
    k = anomaly_slots(split, spec)
    m = spec.batch_size - k
    normals = split.train_normals
    picks = rng.choice(len(normals), size=m, replace=len(normals) < m)
    ids = [normals[i] for i in picks] + _draw_anomalies(split.train_anomalies, k, rng)
    return Batch(tuple(ids), np.array([0] * m + [1] * k, dtype=np.int64))


def epoch_batches(split: OneClassSplit, spec: BatchSpec, rng: np.random.Generator) -> Iterator[Batch]:
    """One pass over the normal pool, each normal sampled without replacement.

    The final batch is topped up from a fresh permutation so every batch has
    exactly ``spec.batch_size`` examples.
    """
    if not split.train_normals:
        raise BatchError("empty normal pool")
    normals = split.train_normals
    k = anomaly_slots(split, spec)
    m = spec.batch_size - k
    order = rng.permutation(len(normals))
    if m == 0:
        n_batches = 1
    else:
        n_batches = math.ceil(len(normals) / m)
        short = n_batches * m - len(normals)
        if short:
            order = np.concatenate([order, rng.choice(len(normals), size=short, replace=len(normals) < short)])
    for b in range(n_batches):
        ids = [normals[i] for i in order[b * m:(b + 1) * m]]
        ids += _draw_anomalies(split.train_anomalies, k, rng)
        yield Batch(tuple(ids), np.array([0] * m + [1] * k, dtype=np.int64))


# Ingestion #################################################################################


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        im.load()
        if im.mode in ("L", "1", "I;16", "I", "F") or (im.mode == "P" and not _palette_has_color(im)):
            arr = np.asarray(im.convert("L"))[:, :, None]
        else:
            arr = np.asarray(im.convert("RGB"))
    if min(arr.shape[:2]) == 0:
        raise ImageFormatError(f"{path}: zero-dimension image")
    return arr


def _palette_has_color(im: Image.Image) -> bool:
    rgb = np.asarray(im.convert("RGB"))
    return not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2]))


def _resize_uint8(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape[:2] == (size, size):
        return arr
    x = torch.from_numpy(arr.astype(np.float32)).permute(2, 0, 1)[None]
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x[0].permute(1, 2, 0).round().clamp(0, 255).to(torch.uint8).numpy()


def _scan_classes(root: Path, mapping: Mapping[str, int]):
    found = []
    for class_name, label in sorted(mapping.items(), key=lambda kv: kv[0]):
        cdir = root / class_name
        if not cdir.is_dir():
            raise IngestionError(f"class directory {cdir} does not exist")
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise IngestionError(f"class directory {cdir} is empty")
        found.extend((f"{class_name}/{p.name}", p, int(label)) for p in files)
    return found


def ingest_image_folder(
    root,
    mapping: Mapping[str, int] | str | Path,
    image_size: int | None = None,
    test_fraction: float = 0.2,
    seed: int = 0,
) -> ImageCorpus:
    """Read ``root/<class_name>/<image>`` trees into a corpus.

    If ``root`` has ``train/`` and ``test/`` subdirectories, each holding the class
    directories, those are the partitions; otherwise ``test_fraction`` of each class
    is held out with a seeded permutation. Unreadable files are skipped with a
    warning and listed in ``corpus.skipped``. Images are resized to ``image_size``
    (default: the size of the first readable image) and stored as uint8.
    """
    root = Path(root)
    if not isinstance(mapping, Mapping):
        mapping = json.loads(Path(mapping).read_text())
    if (root / "train").is_dir() and (root / "test").is_dir():
        entries = [("train/" + k, p, y, False) for k, p, y in _scan_classes(root / "train", mapping)]
        entries += [("test/" + k, p, y, True) for k, p, y in _scan_classes(root / "test", mapping)]
    else:
        scanned = _scan_classes(root, mapping)
        rng = np.random.default_rng(seed)
        entries = []
        for label in sorted({y for _, _, y in scanned}):
            members = [e for e in scanned if e[2] == label]
            n_test = int(round(len(members) * test_fraction))
            held = set(rng.permutation(len(members))[:n_test].tolist())
            entries.extend((k, p, y, j in held) for j, (k, p, y) in enumerate(members))

    images, keep, skipped = [], [], []
    for key, path, label, test in entries:
        try:
            images.append(_load_image(path))
            keep.append((key, label, test))
        except (UnidentifiedImageError, OSError, ImageFormatError, ValueError) as e:
            log.warning("skipping unreadable image %s: %s", path, e)
            skipped.append(key)
    if not images:
        raise IngestionError(f"no readable images under {root}")
    for cname, label in mapping.items():
        if not any(lbl == label for _, lbl, _ in keep):
            raise IngestionError(f"class {cname!r} has no readable images")

    size = image_size or images[0].shape[0]
    channels = 3 if any(im.shape[2] == 3 for im in images) else 1
    stacked = []
    for im in images:
        if im.shape[2] != channels:
            im = np.repeat(im, channels, axis=2)
        stacked.append(_resize_uint8(im, size))
    return ImageCorpus(
        ids=tuple(k for k, _, _ in keep),
        raw=np.stack(stacked),
        labels=np.array([lbl for _, lbl, _ in keep]),
        is_test=np.array([t for _, _, t in keep]),
        class_names={int(v): k for k, v in mapping.items()},
        skipped=tuple(skipped),
        name=root.name,
    )


# Benchmark corpora #########################################################################

_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
BENCHMARK_URLS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    "cifar10": "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
    "cifar100": "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
}


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) into a uint8 array."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        data = f.read()
    if data[0] != 0 or data[1] != 0 or data[2] != 0x08:
        raise ImageFormatError(f"{path}: not an unsigned-byte IDX file")
    ndim = data[3]
    shape = tuple(int.from_bytes(data[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim))
    arr = np.frombuffer(data, dtype=np.uint8, offset=4 + 4 * ndim)
    if arr.size != math.prod(shape):
        raise ImageFormatError(f"{path}: truncated IDX payload")
    return arr.reshape(shape)


def _find(root: Path, name: str) -> Path:
    for candidate in (root / name, root / name.removesuffix(".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(root / name)


def load_mnist_like(root, name: str = "mnist") -> ImageCorpus:
    root = Path(root)
    parts = {k: read_idx(_find(root, v)) for k, v in _MNIST_FILES.items()}
    raw = np.concatenate([parts["train_images"], parts["test_images"]])[..., None]
    labels = np.concatenate([parts["train_labels"], parts["test_labels"]])
    n_train = len(parts["train_labels"])
    return ImageCorpus(
        ids=tuple(f"train/{i:05d}" for i in range(n_train)) + tuple(f"test/{i:05d}" for i in range(len(labels) - n_train)),
        raw=raw,
        labels=labels,
        is_test=np.arange(len(labels)) >= n_train,
        name=name,
    )


def _unpickle(path: Path) -> dict:
    with open(path, "rb") as f:
        return pickle.load(f, encoding="latin1")


def load_cifar(root, coarse: bool | None = None) -> ImageCorpus:
    """Read the python-pickle distribution of CIFAR-10 or CIFAR-100.

    CIFAR-100 uses the 20 coarse superclasses.
    """
    root = Path(root)
    if (root / "cifar-10-batches-py").is_dir():
        root = root / "cifar-10-batches-py"
    elif (root / "cifar-100-python").is_dir():
        root = root / "cifar-100-python"
    if (root / "data_batch_1").exists():
        train = [_unpickle(root / f"data_batch_{i}") for i in range(1, 6)]
        test = [_unpickle(root / "test_batch")]
        key, name = "labels", "cifar10"
    else:
        train, test = [_unpickle(root / "train")], [_unpickle(root / "test")]
        key, name = ("coarse_labels" if coarse in (None, True) else "fine_labels"), "cifar100"

    def stack(batches):
        data = np.concatenate([np.asarray(b["data"], dtype=np.uint8) for b in batches])
        return data.reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1), np.concatenate([b[key] for b in batches])

    xtr, ytr = stack(train)
    xte, yte = stack(test)
    return ImageCorpus(
        ids=tuple(f"train/{i:05d}" for i in range(len(ytr))) + tuple(f"test/{i:05d}" for i in range(len(yte))),
        raw=np.concatenate([xtr, xte]),
        labels=np.concatenate([ytr, yte]),
        is_test=np.arange(len(ytr) + len(yte)) >= len(ytr),
        name=name,
    )


def download_benchmark(name: str, root) -> Path:
    """Fetch a benchmark corpus in its standard distribution format into ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if name in ("mnist", "fashion_mnist"):
        for fname in _MNIST_FILES.values():
            target = root / fname
            if not target.exists():
                urllib.request.urlretrieve(BENCHMARK_URLS[name] + fname, target)
    elif name in ("cifar10", "cifar100"):
        archive = root / BENCHMARK_URLS[name].rsplit("/", 1)[1]
        if not archive.exists():
            urllib.request.urlretrieve(BENCHMARK_URLS[name], archive)
        with tarfile.open(archive) as tar:
            tar.extractall(root, filter="data")
    else:
        raise KeyError(f"unknown benchmark {name!r}")
    return root


def load_benchmark(name: str, root, download: bool = False) -> ImageCorpus:
    if download:
        download_benchmark(name, root)
    if name in ("mnist", "fashion_mnist"):
        return load_mnist_like(root, name)
    if name in ("cifar10", "cifar100"):
        return load_cifar(root)
    raise KeyError(f"unknown benchmark {name!r}")


# Synthetic fixture #########################################################################


def _grating(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(1.0, 3.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    return 0.8 * wave


def _corrupt(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # Same amplitude as the background grating, so the pixel norm carries no signal
    # and only the local frequency and orientation give the patch away.
    size = img.shape[0]
    p = int(rng.integers(size // 4, size // 3 + 1))
    r, c = rng.integers(0, size - p + 1, size=2)
    yy, xx = np.mgrid[0:p, 0:p].astype(np.float64) / size
    angle = rng.uniform(0, np.pi)
    out = img.copy()
    out[r:r + p, c:c + p] = 0.8 * np.sin(2 * np.pi * 6 * (xx * np.cos(angle) + yy * np.sin(angle)))
    return out


def make_synthetic_corpus(
    n_train_normal: int = 2000,
    n_train_anomalous: int = 500,
    n_test_normal: int = 500,
    n_test_anomalous: int = 500,
    size: int = 32,
    seed: int = 0,
) -> ImageCorpus:
    """Toy one-class corpus: class 0 holds smooth oriented gratings, class 1 the
    same kind of grating with a high-frequency grating patch pasted over a random square."""
    rng = np.random.default_rng(seed)
    raws, labels, tests, ids = [], [], [], []
    for part, counts in (("train", (n_train_normal, n_train_anomalous)), ("test", (n_test_normal, n_test_anomalous))):
        j = 0
        for label, count in enumerate(counts):
            for _ in range(count):
                img = _grating(rng, size)
                if label:
                    img = _corrupt(img, rng)
                raws.append(np.round((img + 1.0) * 127.5).clip(0, 255).astype(np.uint8))
                labels.append(label)
                tests.append(part == "test")
                ids.append(f"{part}/{j:05d}")
                j += 1
    return ImageCorpus(
        ids=tuple(ids),
        raw=np.stack(raws)[..., None],
        labels=np.array(labels),
        is_test=np.array(tests),
        class_names={0: "grating", 1: "corrupted"},
        name="synthetic",
    )
