"""Dataset construction and ingestion.

Three families of data feed the experiments:

* color-biased digits: grayscale digits colorized so that, at train time,
  color nearly determines the class label while test-time colors are
  random.  The color is summarized into a 24-bit attribute vector.
* the German credit table, with the customer age diverted into a binary
  protected attribute and removed from the input features.
* analytic fixtures with known mutual information, for validating the
  neural estimator against closed-form oracles.

Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import colorsys
import gzip
import json
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .tensor import Tensor


class DataFormatError(ValueError):
    """A data file violates its documented byte/text format."""


@dataclass
class Dataset:
    """Aligned (x, y, c) triplets: datapoint, one-hot label, attribute.

    ``protected`` optionally flags each sample's protected group for
    fairness metrics.  Instances are immutable by convention and may be
    shared freely.
    """

    x: np.ndarray
    y: np.ndarray
    c: np.ndarray
    protected: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.x)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.y, axis=1)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# color-biased digits
# ---------------------------------------------------------------------------


def default_class_colors() -> np.ndarray:
    """Ten maximally separated mean colors: evenly spaced hues at S=V=1."""
    return np.array([colorsys.hsv_to_rgb(k / 10.0, 1.0, 1.0) for k in range(10)])


@dataclass
class ColoredDigitSpec:
    """Recipe for the color-biased digit benchmark.

    ``sigma`` is the per-channel standard deviation of the train-time
    color noise; smaller values make the color a more reliable shortcut
    and the benchmark harder.
    """

    sigma: float
    train_count: int
    test_count: int
    seed: int
    class_mean_colors: np.ndarray = field(default_factory=default_class_colors)

    def validate(self) -> None:
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        colors = np.asarray(self.class_mean_colors)
        if colors.shape != (10, 3):
            raise ValueError("need exactly 10 RGB mean colors")
        dists = [np.linalg.norm(colors[i] - colors[j])
                 for i in range(10) for j in range(i + 1, 10)]
        if min(dists) <= 0.3:
            raise ValueError("class mean colors are not separated enough "
                             f"(min pairwise distance {min(dists):.3f})")
        if self.train_count < 1 or self.test_count < 1:
            raise ValueError("counts must be positive")


def encode_color_attribute(images: np.ndarray) -> np.ndarray:
    """24-bit encoding of the maximum pixel value, 8 bits per channel.

    Per channel: max over pixels, scaled to 0..255 with round-half-up,
    written most significant bit first; channels concatenated R|G|B.
    Accepts a single (3, H, W) image or a batch (N, 3, H, W).
    """
    single = images.ndim == 3
    batch = images[None] if single else images
    maxima = batch.reshape(batch.shape[0], 3, -1).max(axis=2)
    levels = np.floor(maxima * 255.0 + 0.5).astype(np.int64)
    shifts = np.arange(7, -1, -1)
    bits = (levels[:, :, None] >> shifts[None, None, :]) & 1
    out = bits.reshape(batch.shape[0], 24).astype(np.float64)
    return out[0] if single else out


def _colorize(gray: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Foreground colorization: intensity times RGB color, black background."""
    return np.clip(gray[:, None, :, :] * colors[:, :, None, None], 0.0, 1.0)


def generate_colored_digits(base_images: np.ndarray, base_labels: np.ndarray,
                            spec: ColoredDigitSpec) -> tuple[Dataset, Dataset]:
    """Build the train/test color-bias benchmark from grayscale digits.

    Train images take their class mean color plus Gaussian noise of
    std ``sigma`` per channel; test images take colors drawn uniformly
    per channel from U[0.1, 1], so color carries no label information
    at test time.  Base images are consumed in order: the first
    ``train_count`` for training, the next ``test_count`` for test.
    """
    spec.validate()
    if base_images.ndim != 3 or base_images.shape[1:] != (28, 28):
        raise ValueError(f"base images must be (N, 28, 28), got {base_images.shape}")
    if base_images.min() < 0 or base_images.max() > 1:
        raise ValueError("base images must lie in [0, 1]")
    need = spec.train_count + spec.test_count
    if len(base_images) < need:
        raise ValueError(f"need {need} base digits, have {len(base_images)}")
    rng = np.random.default_rng(spec.seed)
    means = np.asarray(spec.class_mean_colors)

    tr_gray = base_images[:spec.train_count]
    tr_labels = base_labels[:spec.train_count]
    tr_colors = means[tr_labels] + rng.normal(0.0, spec.sigma, size=(spec.train_count, 3))
    tr_x = _colorize(tr_gray, np.clip(tr_colors, 0.0, 1.0))

    te_gray = base_images[spec.train_count:need]
    te_labels = base_labels[spec.train_count:need]
    te_colors = rng.uniform(0.1, 1.0, size=(spec.test_count, 3))
    te_x = _colorize(te_gray, te_colors)

    train = Dataset(x=tr_x, y=one_hot(tr_labels, 10), c=encode_color_attribute(tr_x))
    test = Dataset(x=te_x, y=one_hot(te_labels, 10), c=encode_color_attribute(te_x))
    return train, test


# ---------------------------------------------------------------------------
# IDX ingestion and the bundled digit corpus
# ---------------------------------------------------------------------------

_IDX_IMAGES = 0x00000803
_IDX_LABELS = 0x00000801


def load_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped): big-endian magic, dims, bytes.

    Image files (magic 0x803, 3 dims) come back as (N, H, W) float64 in
    [0, 1]; label files (magic 0x801, 1 dim) as (N,) int64.
    """
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        blob = gzip.open(f).read() if head == b"\x1f\x8b" else f.read()
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated before magic (byte 0)")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic == _IDX_IMAGES:
        ndim = 3
    elif magic == _IDX_LABELS:
        ndim = 1
    else:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08X} (byte 0)")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataFormatError(f"{path}: truncated header (byte {len(blob)})")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) != header + count:
        raise DataFormatError(
            f"{path}: payload is {len(blob) - header} bytes, header promises "
            f"{count} (byte {header})")
    data = np.frombuffer(blob, dtype=np.uint8, offset=header).reshape(dims)
    if magic == _IDX_IMAGES:
        return data.astype(np.float64) / 255.0
    return data.astype(np.int64)


def _augment(images: np.ndarray, labels: np.ndarray, count: int,
             rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Grow a digit pool to ``count`` samples with small random affines."""
    from scipy import ndimage

    if len(images) >= count:
        return images[:count], labels[:count]
    extra_idx = rng.integers(0, len(images), size=count - len(images))
    extras = np.empty((len(extra_idx), 28, 28))
    for i, src in enumerate(extra_idx):
        angle = rng.uniform(-12.0, 12.0)
        zoom = rng.uniform(0.9, 1.1)
        shift = rng.uniform(-1.5, 1.5, size=2)
        img = ndimage.rotate(images[src], angle, reshape=False, order=1)
        mat = np.eye(2) / zoom
        offset = 14.0 - mat @ (np.array([14.0, 14.0]) + shift)
        img = ndimage.affine_transform(img, mat, offset=offset, order=1)
        extras[i] = np.clip(img, 0.0, 1.0)
    x = np.concatenate([images, extras])
    y = np.concatenate([labels, labels[extra_idx]])
    perm = rng.permutation(len(x))
    return x[perm], y[perm]


def load_digit_base(data_dir, train_count: int, test_count: int,
                    seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Load the grayscale digit corpus backing the color-bias benchmark.

    Prefers the canonical four-file corpus (train/t10k images+labels) when
    present in ``data_dir``; otherwise falls back to the bundled
    ``digits-*`` pair, splitting it 85/15 into disjoint train/test pools
    and growing each pool with light affine augmentation if the requested
    counts exceed the pool.  Returns images and labels with the first
    ``train_count`` entries forming the train pool.
    """
    data_dir = str(data_dir)

    def find(stem):
        for suffix in ("", ".gz"):
            p = os.path.join(data_dir, stem + suffix)
            if os.path.exists(p):
                return p
        return None

    canon = [find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"),
             find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte")]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6a5e]))
    if all(canon):
        tr_x, tr_y = load_idx(canon[0]), load_idx(canon[1])
        te_x, te_y = load_idx(canon[2]), load_idx(canon[3])
    else:
        img_path = find("digits-images-idx3-ubyte")
        lab_path = find("digits-labels-idx1-ubyte")
        if not (img_path and lab_path):
            raise FileNotFoundError(
                f"no digit corpus found in '{data_dir}' (expected the "
                "train-/t10k- quadruple or the bundled digits- pair)")
        x, y = load_idx(img_path), load_idx(lab_path)
        split = int(len(x) * 0.85)
        tr_x, tr_y = x[:split], y[:split]
        te_x, te_y = x[split:], y[split:]

    if len(tr_x) < train_count:
        tr_x, tr_y = _augment(tr_x, tr_y, train_count, rng)
    if len(te_x) < test_count:
        te_x, te_y = _augment(te_x, te_y, test_count, rng)
    images = np.concatenate([tr_x[:train_count], te_x[:test_count]])
    labels = np.concatenate([tr_y[:train_count], te_y[:test_count]])
    return images, labels


# ---------------------------------------------------------------------------
# German credit
# ---------------------------------------------------------------------------

# categorical code tables from the UCI documentation; attribute 4 omits the
# "vacation" code that never occurs, attribute 9 includes the documented but
# unobserved fifth code
_GERMAN_CATEGORICAL = {
    0: ["A11", "A12", "A13", "A14"],
    2: ["A30", "A31", "A32", "A33", "A34"],
    3: ["A40", "A41", "A42", "A43", "A44", "A45", "A46", "A48", "A49", "A410"],
    5: ["A61", "A62", "A63", "A64", "A65"],
    6: ["A71", "A72", "A73", "A74", "A75"],
    8: ["A91", "A92", "A93", "A94", "A95"],
    9: ["A101", "A102", "A103"],
    11: ["A121", "A122", "A123", "A124"],
    13: ["A141", "A142", "A143"],
    14: ["A151", "A152", "A153"],
    16: ["A171", "A172", "A173", "A174"],
    18: ["A191", "A192"],
    19: ["A201", "A202"],
}
_GERMAN_AGE_FIELD = 12          # 0-based position of the age column
_GERMAN_NUMERIC = [1, 4, 7, 10, 15, 17]  # numeric fields kept as features
GERMAN_FEATURE_DIM = sum(len(v) for v in _GERMAN_CATEGORICAL.values()) + len(_GERMAN_NUMERIC)


def load_german(path, seed: int) -> tuple[Dataset, Dataset]:
    """Load and encode the German credit table; 70/30 seeded split.

    Categorical attributes are one-hot encoded against the documented
    code tables; numeric attributes are standardized with statistics of
    the train split.  The age column is removed from the features and
    binarized at 25 into the protected attribute (young < 25), emitted
    as a 2-dim one-hot c with column 0 = young.  Labels: good credit is
    the positive class (index 1).
    """
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 21:
                raise DataFormatError(
                    f"{path}:{lineno}: expected 21 fields, found {len(fields)}")
            rows.append((lineno, fields))

    n = len(rows)
    cat_blocks, numeric, ages, labels = [], [], [], []
    for lineno, fields in rows:
        onehots = []
        for col, codes in _GERMAN_CATEGORICAL.items():
            code = fields[col]
            if code not in codes:
                raise DataFormatError(
                    f"{path}:{lineno}: unknown code '{code}' in field {col + 1}")
            block = np.zeros(len(codes))
            block[codes.index(code)] = 1.0
            onehots.append(block)
        cat_blocks.append(np.concatenate(onehots))
        try:
            numeric.append([float(fields[col]) for col in _GERMAN_NUMERIC])
            ages.append(float(fields[_GERMAN_AGE_FIELD]))
            label = int(fields[20])
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: bad numeric field") from e
        if label not in (1, 2):
            raise DataFormatError(f"{path}:{lineno}: label must be 1 or 2")
        labels.append(label)

    cats = np.array(cat_blocks)
    nums = np.array(numeric)
    ages = np.array(ages)
    good = (np.array(labels) == 1).astype(int)   # positive class: good credit
    young = ages < 25.0

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(n * 0.7))
    tr, te = perm[:n_train], perm[n_train:]

    mu = nums[tr].mean(axis=0)
    sd = nums[tr].std(axis=0)
    sd[sd == 0] = 1.0
    nums_std = (nums - mu) / sd

    x = np.concatenate([cats, nums_std], axis=1)
    y = one_hot(good, 2)
    c = np.stack([young, ~young], axis=1).astype(np.float64)

    def subset(idx):
        return Dataset(x=x[idx], y=y[idx], c=c[idx], protected=young[idx])

    return subset(tr), subset(te)


# ---------------------------------------------------------------------------
# analytic fixtures
# ---------------------------------------------------------------------------


@dataclass
class MIFixture:
    """Sampler recipe with a closed-form mutual information reference.

    gaussian_pair: (z, c) bivariate normal with unit marginals and
    correlation ``rho``; true MI is -0.5 ln(1 - rho^2).

    categorical_embed: c uniform one-hot over ``categories``; z is the
    category's anchor point plus isotropic noise of std ``noise``.
    ``true_mi`` is the noiseless reference H(C) = ln(categories); with
    noise the true value sits slightly below it.
    """

    kind: str
    rho: float = 0.0
    categories: int = 4
    noise: float = 0.1

    @property
    def true_mi(self) -> float:
        if self.kind == "gaussian_pair":
            if abs(self.rho) >= 1.0:
                raise ValueError("|rho| must be < 1")
            return -0.5 * math.log(1.0 - self.rho ** 2)
        if self.kind == "categorical_embed":
            return math.log(self.categories)
        raise ValueError(f"unknown fixture kind '{self.kind}'")


def make_mi_fixture(fix: MIFixture, n_samples: int,
                    seed: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Draw (z, c) samples from a fixture; returns (z, c, true_mi)."""
    true_mi = fix.true_mi   # validates parameters
    rng = np.random.default_rng(seed)
    if fix.kind == "gaussian_pair":
        cov = np.array([[1.0, fix.rho], [fix.rho, 1.0]])
        chol = np.linalg.cholesky(cov)
        raw = rng.standard_normal((n_samples, 2)) @ chol.T
        z, c = raw[:, :1], raw[:, 1:]
    else:
        k = fix.categories
        angles = 2.0 * np.pi * np.arange(k) / k
        anchors = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        cats = rng.integers(0, k, size=n_samples)
        z = anchors[cats] + fix.noise * rng.standard_normal((n_samples, 2))
        c = one_hot(cats, k)
    return z, c, true_mi


# ---------------------------------------------------------------------------
# dataset caching
# ---------------------------------------------------------------------------


def save_dataset(dir_path, name: str, ds: Dataset, manifest_fields: dict) -> None:
    """Cache a generated dataset: snapshot binary plus a JSON-lines manifest."""
    os.makedirs(dir_path, exist_ok=True)
    arrays = [("x", Tensor(ds.x)), ("y", Tensor(ds.y)), ("c", Tensor(ds.c))]
    if ds.protected is not None:
        arrays.append(("protected", Tensor(ds.protected.astype(np.float64))))
    nn.save_params(os.path.join(dir_path, f"{name}.bin"), arrays)
    with open(os.path.join(dir_path, "manifest.jsonl"), "a") as f:
        f.write(json.dumps({"name": name, **manifest_fields}) + "\n")


def load_dataset(dir_path, name: str) -> Dataset:
    arrays = nn.load_params(os.path.join(dir_path, f"{name}.bin"))
    protected = arrays.get("protected")
    return Dataset(x=arrays["x"], y=arrays["y"], c=arrays["c"],
                   protected=None if protected is None else protected.astype(bool))
