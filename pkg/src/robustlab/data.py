"""Datasets, augmentation, pseudo-labeling, and batch composition.

Images are float arrays in [0, 1] with CHW layout.  On-disk datasets use
the IDX container (big-endian magic + dims header followed by raw values),
one images file and one labels file per split, so real MNIST files drop in
unchanged.  A bundled 8x8 handwritten-digits set (via scikit-learn) keeps
everything runnable offline.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import models
from .errors import ConfigurationError, ContractViolation
from .seeding import derive

PAD = 4
GRAY_DROP_P = 0.2
DUP_RMS_THRESHOLD = 0.02  # per-pixel rms distance below which images match


@dataclass
class Example:
    image: np.ndarray          # (C, H, W) in [0, 1]
    label: int
    is_pseudo: bool = False
    score: float = None        # pseudo-label confidence, absent otherwise

    def __post_init__(self):
        if self.label < 0:
            raise ContractViolation("label must be a class index")
        if not self.is_pseudo and self.score is not None:
            raise ContractViolation("score is only meaningful for pseudo labels")


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    labeled_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigurationError("labeled_fraction must be in (0, 1]")
        if self.n_labeled < 1:
            raise ConfigurationError(
                "batch composition needs at least one labeled example")

    @property
    def n_labeled(self) -> int:
        return round_half_up(self.batch_size * self.labeled_fraction)

    @property
    def n_pseudo(self) -> int:
        return self.batch_size - self.n_labeled


@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    is_pseudo: np.ndarray


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def parse_ratio(text: str) -> float:
    """'a:b' labeled-to-unlabeled ratio -> labeled fraction a/(a+b)."""
    try:
        a, b = (float(v) for v in str(text).split(":"))
    except ValueError:
        raise ConfigurationError(f"ratio must look like '3:7', got {text!r}") \
            from None
    if a <= 0 or b < 0:
        raise ConfigurationError(f"ratio parts must be positive, got {text!r}")
    return a / (a + b)


def labeled_equivalent_epochs(steps: int, plan: BatchPlan,
                              n_labeled: int) -> float:
    """Progress in passes over the labeled set: steps * B * r / |labeled|."""
    return steps * plan.batch_size * plan.labeled_fraction / n_labeled


def steps_per_epoch(plan: BatchPlan, n_labeled: int) -> int:
    return max(1, int(n_labeled / (plan.batch_size * plan.labeled_fraction)))


# --- augmentation -------------------------------------------------------------

def _to_gray(image: np.ndarray) -> np.ndarray:
    gray = image.mean(axis=0, keepdims=True)
    return np.broadcast_to(gray, image.shape).copy()


def augment(image: np.ndarray, rng, color_jitter_strength=None) -> np.ndarray:
    """Reflection-pad-and-crop plus horizontal flip; optional color jitter.

    Jitter of strength s draws brightness/contrast/saturation factors from
    [1-s, 1+s] and always applies a gray-scale drop with probability 0.2,
    even at s=0.  Output is clipped back to [0, 1].
    """
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (PAD, PAD), (PAD, PAD)), mode="reflect")
    oy = int(rng.integers(0, 2 * PAD + 1))
    ox = int(rng.integers(0, 2 * PAD + 1))
    out = padded[:, oy:oy + h, ox:ox + w].copy()
    if rng.random() < 0.5:
        out = out[:, :, ::-1].copy()

    if color_jitter_strength is not None:
        s = float(color_jitter_strength)
        if s < 0:
            raise ConfigurationError("jitter strength must be >= 0")
        fb, fc, fs = (rng.uniform(max(0.0, 1 - s), 1 + s) for _ in range(3))
        out = out * fb
        mean = out.mean()
        out = (out - mean) * fc + mean
        gray = _to_gray(out)
        out = (out - gray) * fs + gray
        if rng.random() < GRAY_DROP_P:
            out = _to_gray(out)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment_batch(images: np.ndarray, seed: int, step: int,
                  color_jitter_strength=None) -> np.ndarray:
    out = np.empty_like(images)
    for i in range(images.shape[0]):
        rng = derive(seed, "aug", step, i)
        out[i] = augment(images[i], rng, color_jitter_strength)
    return out


# --- pseudo-labeling ----------------------------------------------------------

def _near_duplicates(pool: np.ndarray, reference: np.ndarray,
                     chunk: int = 256) -> np.ndarray:
    """Mask of pool images that match a reference image exactly or within
    the rms threshold."""
    n = pool.shape[0]
    flat_pool = pool.reshape(n, -1).astype(np.float64)
    flat_ref = reference.reshape(reference.shape[0], -1).astype(np.float64)
    d = flat_pool.shape[1]
    ref_sq = (flat_ref ** 2).sum(axis=1)
    dup = np.zeros(n, dtype=bool)
    for start in range(0, n, chunk):
        block = flat_pool[start:start + chunk]
        d2 = ((block ** 2).sum(axis=1)[:, None] + ref_sq[None, :]
              - 2.0 * block @ flat_ref.T)
        rms = np.sqrt(np.maximum(d2, 0.0) / d)
        dup[start:start + chunk] = (rms <= DUP_RMS_THRESHOLD).any(axis=1)
    return dup


def pseudo_label(classifier, pool: np.ndarray, test_images: np.ndarray,
                 n_select: int, num_classes: int):
    """Score an unlabeled pool and keep the top n/C images per class.

    Near-duplicates of test images are removed first; scores are the
    classifier's max softmax and labels its argmax.  Returns the selected
    Examples plus a table of (pool_id, predicted_label, score) rows.
    Selection is by descending score with pool order as the tie-break, so
    growing n yields nested selections.
    """
    pool = np.asarray(pool)
    if n_select % num_classes != 0:
        raise ConfigurationError(
            f"n={n_select} must be divisible by the class count {num_classes}")
    if pool.shape[0] <= n_select:
        raise ConfigurationError(
            f"pool of {pool.shape[0]} must exceed n={n_select}")
    per_class = n_select // num_classes

    keep = ~_near_duplicates(pool, np.asarray(test_images))
    logits = models.eval_logits(classifier, pool)
    exp = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = exp / exp.sum(axis=1, keepdims=True)
    scores = probs.max(axis=1)
    predicted = probs.argmax(axis=1)

    examples = []
    rows = []
    deficient = {}
    for cls in range(num_classes):
        candidates = np.flatnonzero(keep & (predicted == cls))
        if candidates.size < per_class:
            deficient[cls] = int(candidates.size)
            continue
        order = candidates[np.lexsort((candidates, -scores[candidates]))]
        for idx in order[:per_class]:
            examples.append(Example(image=pool[idx], label=cls,
                                    is_pseudo=True, score=float(scores[idx])))
            rows.append({"pool_id": int(idx), "predicted_label": cls,
                         "score": float(scores[idx])})
    if deficient:
        raise ContractViolation(
            f"not enough candidates for classes {sorted(deficient)}: "
            f"need {per_class} each, have {deficient}")
    return examples, rows


def write_pseudo_label_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["pool_id", "predicted_label", "score"])
        w.writeheader()
        for row in rows:
            w.writerow(row)


# --- batch composition ----------------------------------------------------------

class ExampleStream:
    """Infinite stream over a fixed example list, reshuffled every pass."""

    def __init__(self, examples, seed: int, tag: str = "stream"):
        if not examples:
            raise ConfigurationError("stream needs at least one example")
        self._examples = list(examples)
        self._seed = seed
        self._tag = tag
        self._pass = 0
        self._cursor = 0
        self._order = self._shuffle()
        self.consumed = 0

    def _shuffle(self):
        rng = derive(self._seed, self._tag, self._pass)
        return rng.permutation(len(self._examples))

    def take(self, n: int):
        out = []
        while len(out) < n:
            if self._cursor >= len(self._order):
                self._pass += 1
                self._cursor = 0
                self._order = self._shuffle()
            out.append(self._examples[self._order[self._cursor]])
            self._cursor += 1
        self.consumed += n
        return out


def compose_batch(labeled_stream, pseudo_stream, plan: BatchPlan,
                  step: int = 0) -> Batch:
    """Exact per-batch mixture: round(B*r) labeled plus the rest pseudo."""
    n_lab, n_pse = plan.n_labeled, plan.n_pseudo
    if n_pse > 0 and pseudo_stream is None:
        raise ConfigurationError(
            "labeled fraction below 1 requires a pseudo-labeled stream")
    chosen = labeled_stream.take(n_lab)
    if n_pse > 0:
        chosen = chosen + pseudo_stream.take(n_pse)
    order = derive(plan.seed, "batch", step).permutation(len(chosen))
    images = np.stack([chosen[i].image for i in order])
    labels = np.asarray([chosen[i].label for i in order], dtype=np.int64)
    is_pseudo = np.asarray([chosen[i].is_pseudo for i in order], dtype=bool)
    return Batch(images=images, labels=labels, is_pseudo=is_pseudo)


# --- datasets --------------------------------------------------------------------

@dataclass
class Dataset:
    name: str
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.name, self.images[idx], self.labels[idx],
                       self.num_classes)

    def examples(self):
        return [Example(image=self.images[i], label=int(self.labels[i]))
                for i in range(len(self))]


def load_digits() -> Dataset:
    """Bundled 8x8 handwritten digits (1797 images, 17 gray levels)."""
    from sklearn.datasets import load_digits as _sk_digits

    raw = _sk_digits()
    images = (raw.images / 16.0).astype(np.float32)[:, None, :, :]
    return Dataset("digits", images, raw.target.astype(np.int64), 10)


TYPESET_DEFAULT_SIZE = 6000


def _typeset_fonts():
    from pathlib import Path

    import matplotlib

    font_dir = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
    # the sans family renders every digit reliably; some symbol fonts ship
    # empty glyphs for plain digits
    files = sorted(str(p) for p in font_dir.glob("DejaVuSans*.ttf")
                   if "Display" not in p.name)
    if not files:
        files = sorted(str(p) for p in font_dir.glob("*.ttf"))
    if not files:
        raise ConfigurationError("no .ttf fonts found for the typeset set")
    return files


def make_typeset_digits(n: int, seed: int = 0, side: int = 28,
                        rotation: float = 10.0, jitter: int = 2) -> Dataset:
    """Rendered digit images with random font, size, shift, and rotation.

    Digits are drawn oversized, rotated, then cropped around their center
    of mass with a small offset jitter, mirroring handwritten-digit
    preprocessing: saturated strokes on black background, roughly centered.
    Deterministic given the seed.
    """
    from PIL import Image, ImageDraw, ImageFont

    font_files = _typeset_fonts()
    rng = derive(seed, "typeset")
    lo = max(10, int(side * 0.64))
    hi = max(lo + 1, int(side * 0.79))
    images = np.zeros((n, 1, side, side), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    for i in range(n):
        digit = i % 10
        while True:
            size = int(rng.integers(lo, hi + 1))
            path = font_files[int(rng.integers(len(font_files)))]
            font = ImageFont.truetype(path, size)
            img = Image.new("L", (side * 2, side * 2), 0)
            ImageDraw.Draw(img).text((side // 2, side // 2), str(digit),
                                     fill=255, font=font)
            angle = float(rng.uniform(-rotation, rotation))
            img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
            arr = np.asarray(img, dtype=np.float32) / 255.0
            ys, xs = np.nonzero(arr > 0.05)
            if ys.size > 10:  # a font without this glyph renders nothing
                break
        oy = int(round(ys.mean())) - side // 2 + int(rng.integers(-jitter,
                                                                  jitter + 1))
        ox = int(round(xs.mean())) - side // 2 + int(rng.integers(-jitter,
                                                                  jitter + 1))
        oy = int(np.clip(oy, 0, side))
        ox = int(np.clip(ox, 0, side))
        images[i, 0] = arr[oy:oy + side, ox:ox + side]
        labels[i] = digit
    perm = rng.permutation(n)
    return Dataset("typeset", images[perm], labels[perm], 10)


# IDX container: int16 zero prefix, dtype byte, ndim byte, then big-endian
# uint32 extents, then raw values
_IDX_DTYPES = {0x08: np.uint8, 0x0D: np.float32}
_IDX_CODES = {np.dtype(np.uint8): 0x08, np.dtype(np.float32): 0x0D}


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    code = _IDX_CODES.get(array.dtype)
    if code is None:
        raise ContractViolation(f"idx supports uint8/float32, got {array.dtype}")
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, code, array.ndim))
        for dim in array.shape:
            f.write(struct.pack(">I", dim))
        f.write(array.astype(array.dtype.newbyteorder(">")).tobytes())


def read_idx(path) -> np.ndarray:
    with open(path, "rb") as f:
        zero, code, ndim = struct.unpack(">HBB", f.read(4))
        if zero != 0 or code not in _IDX_DTYPES:
            raise ContractViolation(f"{path}: not an idx file")
        shape = struct.unpack(f">{ndim}I", f.read(4 * ndim))
        dtype = np.dtype(_IDX_DTYPES[code]).newbyteorder(">")
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise ContractViolation(f"{path}: truncated idx payload")
    return data.reshape(shape).astype(_IDX_DTYPES[code])


_SPLIT_FILE_CANDIDATES = {
    "train": [("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
              ("train-images.idx", "train-labels.idx")],
    "test": [("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
             ("test-images.idx", "test-labels.idx")],
}


def load_idx_dir(path, split: str, name: str = None) -> Dataset:
    """Load one split from a directory of IDX files (MNIST layout or the
    generic <split>-images.idx / <split>-labels.idx naming)."""
    for img_name, lab_name in _SPLIT_FILE_CANDIDATES.get(split, []):
        img_path = os.path.join(path, img_name)
        lab_path = os.path.join(path, lab_name)
        if os.path.exists(img_path) and os.path.exists(lab_path):
            images = read_idx(img_path)
            labels = read_idx(lab_path).astype(np.int64)
            if images.ndim == 3:
                images = images[:, None, :, :]
            if images.dtype == np.uint8:
                images = images.astype(np.float32) / 255.0
            num_classes = int(labels.max()) + 1
            return Dataset(name or os.path.basename(str(path)),
                           images.astype(np.float32), labels, num_classes)
    raise ConfigurationError(
        f"no idx files for split {split!r} under {path}")


def load_dataset(name: str, data_dir: str = "data", split: str = "train"):
    """Named dataset loader: 'digits' and 'typeset' are generated locally;
    anything else is a directory of IDX files under `data_dir`."""
    if name == "digits":
        return load_digits()
    if name == "typeset":
        return make_typeset_digits(TYPESET_DEFAULT_SIZE, seed=7)
    return load_idx_dir(os.path.join(data_dir, name), split, name=name)


def split_dataset(ds: Dataset, sizes: dict, seed: int = 0) -> dict:
    """Disjoint named splits; sizes maps name -> count, -1 takes the rest."""
    total = len(ds)
    perm = derive(seed, "split").permutation(total)
    out = {}
    start = 0
    rest_key = None
    for key, size in sizes.items():
        if size == -1:
            rest_key = key
            continue
        if start + size > total:
            raise ConfigurationError(
                f"split sizes exceed dataset of {total} examples")
        out[key] = ds.subset(perm[start:start + size])
        start += size
    if rest_key is not None:
        out[rest_key] = ds.subset(perm[start:])
    return out


def semisup_surrogate(ds: Dataset, n_labeled: int, seed: int = 0):
    """Split a labeled dataset into a small labeled part and an unlabeled
    pool with labels hidden, for exercising the pseudo-label pipeline."""
    parts = split_dataset(ds, {"labeled": n_labeled, "pool": -1}, seed=seed)
    pool = parts["pool"]
    return parts["labeled"], pool.images, pool.labels  # true labels for audit
