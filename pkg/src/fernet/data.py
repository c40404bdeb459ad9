"""Dataset ingestion, face registration, augmentation, and protocol splits.

Samples are grayscale 48x48 images stored normalized to [0,1] with one
of seven expression labels (AN, DI, FE, HA, NE, SA, SU), a subject id,
a database id, and an optional predefined usage (train/val/test).
Containers hold parallel arrays; everything here is pure and
deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (ConfigError, DataError, DegeneracyError, LabelError,
                     ParseError, ShapeError)
from .ioutil import atomic_write_bytes, atomic_write_text

LABEL_CODES = ("AN", "DI", "FE", "HA", "NE", "SA", "SU")
LABEL_TO_INDEX = {code: i for i, code in enumerate(LABEL_CODES)}
NUM_CLASSES = len(LABEL_CODES)

IMAGE_SIZE = 48
CROP_SIZE = 40
# (row, col) offsets of the four corner crops and the center crop
CROP_OFFSETS = ((0, 0), (0, 8), (8, 0), (8, 8), (4, 4))

USAGE_VALUES = ("", "train", "val", "test")

# FER2013 emotion integers -> label codes (note 4 is sadness, 6 neutral)
FER_EMOTION_TO_CODE = {0: "AN", 1: "DI", 2: "FE", 3: "HA",
                       4: "SA", 5: "SU", 6: "NE"}
FER_USAGE_MAP = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}


def label_index(code: str) -> int:
    try:
        return LABEL_TO_INDEX[code]
    except KeyError:
        raise LabelError(f"unknown label {code!r}; expected one of {LABEL_CODES}")


@dataclass(frozen=True)
class Sample:
    """One prepared image with its metadata."""

    image: np.ndarray  # [1, 48, 48] float32 in [0, 1]
    label: str
    subject_id: str
    database_id: str
    usage: str | None = None


class DatasetManifest:
    """Immutable collection of prepared samples as parallel arrays.

    ``images`` is float32 [n,1,48,48] in [0,1]; ``labels`` holds class
    indices into LABEL_CODES; subjects, databases, and usages are string
    tuples (usage "" means no predefined split).
    """

    def __init__(self, images, labels, subjects, databases, usages=None):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise DataError(
                f"images must be [n,1,{IMAGE_SIZE},{IMAGE_SIZE}], got {images.shape}"
            )
        n = images.shape[0]
        if n and (float(images.min()) < 0.0 or float(images.max()) > 1.0):
            raise DataError("image intensities must lie in [0, 1]")
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (n,):
            raise DataError(f"labels shape {labels.shape} != ({n},)")
        if n and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise LabelError("label indices must lie in [0, 7)")
        if usages is None:
            usages = [""] * n
        subjects = tuple(str(s) for s in subjects)
        databases = tuple(str(d) for d in databases)
        usages = tuple("" if u is None else str(u) for u in usages)
        if len(subjects) != n or len(databases) != n or len(usages) != n:
            raise DataError("metadata columns must match the number of images")
        for u in usages:
            if u not in USAGE_VALUES:
                raise DataError(f"usage must be one of {USAGE_VALUES}, got {u!r}")
        self.images = images
        self.labels = labels
        self.subjects = subjects
        self.databases = databases
        self.usages = usages
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(image=self.images[i], label=LABEL_CODES[self.labels[i]],
                      subject_id=self.subjects[i], database_id=self.databases[i],
                      usage=self.usages[i] or None)

    def subset(self, indices) -> "DatasetManifest":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetManifest(
            self.images[indices], self.labels[indices],
            [self.subjects[i] for i in indices],
            [self.databases[i] for i in indices],
            [self.usages[i] for i in indices],
        )

    @classmethod
    def merge(cls, manifests) -> "DatasetManifest":
        manifests = list(manifests)
        if not manifests:
            raise DataError("nothing to merge")
        return cls(
            np.concatenate([m.images for m in manifests]),
            np.concatenate([m.labels for m in manifests]),
            [s for m in manifests for s in m.subjects],
            [d for m in manifests for d in m.databases],
            [u for m in manifests for u in m.usages],
        )

    @classmethod
    def from_samples(cls, samples) -> "DatasetManifest":
        samples = list(samples)
        return cls(
            np.stack([s.image for s in samples]) if samples
            else np.zeros((0, 1, IMAGE_SIZE, IMAGE_SIZE), np.float32),
            [label_index(s.label) for s in samples],
            [s.subject_id for s in samples],
            [s.database_id for s in samples],
            [s.usage or "" for s in samples],
        )

    def counts(self) -> dict:
        """Per-database per-label sample counts."""
        table: dict[str, dict[str, int]] = {}
        for db, lab in zip(self.databases, self.labels):
            row = table.setdefault(db, {code: 0 for code in LABEL_CODES})
            row[LABEL_CODES[lab]] += 1
        return table

    def usage_indices(self, usage: str) -> np.ndarray:
        return np.array([i for i, u in enumerate(self.usages) if u == usage],
                        dtype=np.int64)


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def load_fer2013_csv(path) -> DatasetManifest:
    """Parse the public FER2013 release (header ``emotion,pixels,Usage``).

    Each row carries 2304 space-separated intensities (row-major 48x48).
    Emotion integers map 0..6 to AN, DI, FE, HA, SA, SU, NE; the Usage
    column maps Training/PublicTest/PrivateTest to train/val/test.  Rows
    get unique subject ids (the database has no subject identity) under
    database id "FER2013".  Parse failures name the 1-based file line.
    """
    images, labels, subjects, usages = [], [], [], []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file", row=1)
        if [h.strip() for h in header] != ["emotion", "pixels", "Usage"]:
            raise ParseError(f"unexpected header {header!r}", row=1)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ParseError(f"expected 3 columns, got {len(row)}", row=row_no)
            emotion_text, pixels_text, usage_text = row
            try:
                emotion = int(emotion_text)
            except ValueError:
                raise ParseError(f"bad emotion {emotion_text!r}", row=row_no)
            if emotion not in FER_EMOTION_TO_CODE:
                raise ParseError(f"emotion {emotion} outside 0-6", row=row_no)
            tokens = pixels_text.split()
            if len(tokens) != IMAGE_SIZE * IMAGE_SIZE:
                raise ParseError(
                    f"expected {IMAGE_SIZE * IMAGE_SIZE} pixels, got {len(tokens)}",
                    row=row_no)
            try:
                pix = np.array(tokens, dtype=np.float32)
            except ValueError:
                raise ParseError("non-integer pixel value", row=row_no)
            if pix.min() < 0 or pix.max() > 255:
                raise ParseError("pixel outside 0-255", row=row_no)
            usage_text = usage_text.strip()
            if usage_text and usage_text not in FER_USAGE_MAP:
                raise ParseError(f"unknown Usage {usage_text!r}", row=row_no)
            images.append((pix / 255.0).reshape(1, IMAGE_SIZE, IMAGE_SIZE))
            labels.append(label_index(FER_EMOTION_TO_CODE[emotion]))
            subjects.append(f"FER2013:r{row_no}")
            usages.append(FER_USAGE_MAP.get(usage_text, ""))
    if not images:
        raise ParseError("no data rows", row=1)
    return DatasetManifest(np.stack(images), labels, subjects,
                           ["FER2013"] * len(labels), usages)


def load_manifest(path) -> DatasetManifest:
    """Load a generic manifest CSV: ``path,label,subject_id,database_id,usage``.

    Image paths resolve relative to the manifest's directory.  Images
    are read as 8-bit grayscale (color converted by luminance), resized
    to 48x48 bilinearly, and normalized to [0,1].
    """
    from PIL import Image

    root = os.path.dirname(os.path.abspath(path))
    images, labels, subjects, databases, usages = [], [], [], [], []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty manifest", row=1)
        if [h.strip() for h in header] != ["path", "label", "subject_id",
                                           "database_id", "usage"]:
            raise ParseError(f"unexpected header {header!r}", row=1)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ParseError(f"expected 5 columns, got {len(row)}", row=row_no)
            img_path, label, subject, database, usage = (c.strip() for c in row)
            if label not in LABEL_TO_INDEX:
                raise DataError(f"unknown label {label!r} (row {row_no})")
            if usage not in USAGE_VALUES:
                raise DataError(f"unknown usage {usage!r} (row {row_no})")
            full = img_path if os.path.isabs(img_path) else os.path.join(root, img_path)
            try:
                with Image.open(full) as img:
                    gray = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
            except OSError as exc:
                raise DataError(f"cannot read image {img_path!r}: {exc} (row {row_no})")
            if gray.shape != (IMAGE_SIZE, IMAGE_SIZE):
                gray = resize_bilinear(gray, IMAGE_SIZE, IMAGE_SIZE)
            images.append(np.clip(gray, 0.0, 1.0)[None])
            labels.append(label_index(label))
            subjects.append(f"{database}:{subject}")
            databases.append(database)
            usages.append(usage)
    if not images:
        raise ParseError("no data rows", row=1)
    return DatasetManifest(np.stack(images), labels, subjects, databases, usages)


def save_prepared(manifest: DatasetManifest, out_dir) -> None:
    """Persist a manifest as ``images.npy`` (uint8) plus ``index.csv``."""
    os.makedirs(out_dir, exist_ok=True)
    quantized = np.rint(manifest.images * 255.0).astype(np.uint8)
    buffer = io.BytesIO()
    np.save(buffer, quantized)
    atomic_write_bytes(os.path.join(out_dir, "images.npy"), buffer.getvalue())

    text = io.StringIO()
    writer = csv.writer(text, lineterminator="\n")
    writer.writerow(["label", "subject_id", "database_id", "usage"])
    for i in range(len(manifest)):
        writer.writerow([LABEL_CODES[manifest.labels[i]], manifest.subjects[i],
                         manifest.databases[i], manifest.usages[i]])
    atomic_write_text(os.path.join(out_dir, "index.csv"), text.getvalue())


def load_prepared(directory) -> DatasetManifest:
    """Inverse of :func:`save_prepared`."""
    images_path = os.path.join(directory, "images.npy")
    index_path = os.path.join(directory, "index.csv")
    if not os.path.exists(images_path) or not os.path.exists(index_path):
        raise DataError(f"{directory!r} is not a prepared dataset directory")
    raw = np.load(images_path)
    images = raw.astype(np.float32) / 255.0
    labels, subjects, databases, usages = [], [], [], []
    with open(index_path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if header != ["label", "subject_id", "database_id", "usage"]:
            raise ParseError(f"unexpected index header {header!r}", row=1)
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ParseError(f"expected 4 columns, got {len(row)}", row=row_no)
            labels.append(label_index(row[0]))
            subjects.append(row[1])
            databases.append(row[2])
            usages.append(row[3])
    return DatasetManifest(images, labels, subjects, databases, usages)


# ---------------------------------------------------------------------------
# Resize, flip, crops
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _axis_weights(in_len: int, out_len: int):
    """Bilinear gather plan for one axis under the half-pixel convention.

    Source positions are the exact rationals ((2j+1)*in - out)/(2*out);
    both neighbor weights are computed by integer division so that the
    plan is exactly mirror-symmetric, which keeps resizing and
    horizontal flipping bitwise-commutable.
    """
    j = np.arange(out_len, dtype=np.int64)
    num = (2 * j + 1) * in_len - out_len
    den = 2 * out_len
    lo = num // den
    rem = num - lo * den
    i0 = np.clip(lo, 0, in_len - 1)
    i1 = np.clip(lo + 1, 0, in_len - 1)
    w1 = rem.astype(np.float64) / float(den)
    w0 = (den - rem).astype(np.float64) / float(den)
    edge = (lo < 0) | (lo >= in_len - 1)
    w0 = np.where(edge, 1.0, w0)
    w1 = np.where(edge, 0.0, w1)
    return i0, i1, w0, w1


def _resize_last_axis(x, out_len):
    i0, i1, w0, w1 = _axis_weights(x.shape[-1], out_len)
    w0 = w0.astype(x.dtype)
    w1 = w1.astype(x.dtype)
    return x[..., i0] * w0 + x[..., i1] * w1


def resize_bilinear(x, out_h, out_w):
    """Separable bilinear resize of the trailing two axes.

    Rows first, then columns; weights are exact dyadic rationals so a
    horizontal flip commutes with the resize bitwise.
    """
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"resize needs at least 2 axes, got shape {x.shape}")
    if x.shape[-1] < 1 or x.shape[-2] < 1 or out_h < 1 or out_w < 1:
        raise ShapeError(f"cannot resize {x.shape[-2:]} to {(out_h, out_w)}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float32)
    rows = np.swapaxes(_resize_last_axis(np.swapaxes(x, -1, -2), out_h), -1, -2)
    return _resize_last_axis(rows, out_w)


def flip_horizontal(x):
    """Mirror the last axis; an exact involution."""
    return np.ascontiguousarray(np.asarray(x)[..., ::-1])


def ten_crop(image):
    """Five 40x40 crops (corners + center) and their horizontal mirrors.

    Input must be 48x48 in its trailing axes.  Each crop is bilinearly
    resized back to 48x48.  Order: for each offset in CROP_OFFSETS, the
    crop then its flip.
    """
    image = np.asarray(image)
    if image.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"ten_crop expects trailing {IMAGE_SIZE}x{IMAGE_SIZE}, "
                         f"got {image.shape}")
    views = []
    for dy, dx in CROP_OFFSETS:
        crop = image[..., dy:dy + CROP_SIZE, dx:dx + CROP_SIZE]
        resized = resize_bilinear(crop, IMAGE_SIZE, IMAGE_SIZE)
        views.append(resized)
        views.append(flip_horizontal(resized))
    return views


def apply_views(images, view_indices):
    """Select one of 11 views per image: 0 = original, 1..10 = ten_crop order.

    ``images`` is [n,c,48,48]; returns a new array of the same shape.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected [n,c,48,48], got {images.shape}")
    view_indices = np.asarray(view_indices)
    if view_indices.shape != (images.shape[0],):
        raise ShapeError("one view index per image required")
    if view_indices.size and (view_indices.min() < 0 or view_indices.max() > 10):
        raise ShapeError("view indices must lie in [0, 10]")
    out = images.copy()
    for v in range(1, 11):
        mask = view_indices == v
        if not mask.any():
            continue
        dy, dx = CROP_OFFSETS[(v - 1) // 2]
        crop = images[mask][:, :, dy:dy + CROP_SIZE, dx:dx + CROP_SIZE]
        resized = resize_bilinear(crop, IMAGE_SIZE, IMAGE_SIZE)
        if (v - 1) % 2:
            resized = flip_horizontal(resized)
        out[mask] = resized
    return out


# ---------------------------------------------------------------------------
# Landmarks and affine registration
# ---------------------------------------------------------------------------

NUM_LANDMARKS = 49


@dataclass(frozen=True)
class LandmarkSet:
    """49 (x, y) points in pixel coordinates."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 2):
            raise DataError(f"landmark set must be [{NUM_LANDMARKS},2], got {pts.shape}")
        if not np.isfinite(pts).all():
            raise DataError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)


def load_landmarks(path) -> LandmarkSet:
    """Read a 49-line ``x y`` sidecar file."""
    points = []
    with open(path, encoding="utf-8") as handle:
        for row_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'x y', got {line!r}", row=row_no)
            try:
                points.append((float(parts[0]), float(parts[1])))
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {line!r}", row=row_no)
    if len(points) != NUM_LANDMARKS:
        raise DataError(f"{path}: expected {NUM_LANDMARKS} landmarks, got {len(points)}")
    return LandmarkSet(np.array(points, dtype=np.float64))


def mean_shape(landmark_sets) -> LandmarkSet:
    """Pointwise arithmetic mean of corresponding landmarks."""
    landmark_sets = list(landmark_sets)
    if not landmark_sets:
        raise DataError("mean shape of an empty landmark list")
    stack = np.stack([ls.points for ls in landmark_sets])
    return LandmarkSet(stack.mean(axis=0))


@dataclass(frozen=True)
class AffineTransform:
    """2x3 matrix [a b tx; c d ty] acting on (x, y) column points."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise DataError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.isfinite(m).all():
            raise DataError("affine matrix entries must be finite")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @property
    def det(self) -> float:
        m = self.matrix
        return float(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0])

    def apply(self, points) -> np.ndarray:
        """Map [n,2] (x, y) points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """self after inner: (self.compose(inner)).apply == self.apply(inner.apply(.))."""
        linear = self.matrix[:, :2] @ inner.matrix[:, :2]
        shift = self.matrix[:, :2] @ inner.matrix[:, 2] + self.matrix[:, 2]
        return AffineTransform(np.column_stack([linear, shift]))

    def invert(self) -> "AffineTransform":
        det = self.det
        if abs(det) <= 1e-12:
            raise DegeneracyError(f"affine transform is singular (det={det:.3e})")
        a, b, tx = self.matrix[0]
        c, d, ty = self.matrix[1]
        inv_linear = np.array([[d, -b], [-c, a]]) / det
        inv_shift = -inv_linear @ np.array([tx, ty])
        return AffineTransform(np.column_stack([inv_linear, inv_shift]))


def fit_affine(source: LandmarkSet, target: LandmarkSet) -> AffineTransform:
    """Least-squares affine mapping source points onto target points.

    Solves the two independent 3-parameter systems through the normal
    equations; a rank-deficient source configuration (collinear points)
    raises DegeneracyError.
    """
    s = source.points
    t = target.points
    design = np.column_stack([s, np.ones(len(s))])
    gram = design.T @ design
    if np.linalg.matrix_rank(gram) < 3:
        raise DegeneracyError("source landmarks are collinear or otherwise degenerate")
    row_x = np.linalg.solve(gram, design.T @ t[:, 0])
    row_y = np.linalg.solve(gram, design.T @ t[:, 1])
    return AffineTransform(np.vstack([row_x, row_y]))


def warp_affine(image, transform: AffineTransform, out_size):
    """Inverse-mapping bilinear warp; out-of-bounds source reads are 0.

    ``transform`` maps source pixel coordinates to output coordinates;
    the output grid is pulled back through its inverse.
    """
    image = np.asarray(image)
    if not np.issubdtype(image.dtype, np.floating):
        image = image.astype(np.float32)
    h, w = image.shape[-2:]
    out_h, out_w = out_size
    inverse = transform.invert().matrix

    ys, xs = np.meshgrid(np.arange(out_h, dtype=np.float64),
                         np.arange(out_w, dtype=np.float64), indexing="ij")
    src_x = inverse[0, 0] * xs + inverse[0, 1] * ys + inverse[0, 2]
    src_y = inverse[1, 0] * xs + inverse[1, 1] * ys + inverse[1, 2]

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0).astype(image.dtype)
    fy = (src_y - y0).astype(image.dtype)

    result = np.zeros(image.shape[:-2] + (out_h, out_w), dtype=image.dtype)
    for dy_n, dx_n, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy_n
        xx = x0 + dx_n
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        gathered = image[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        result += gathered * (weight * valid)
    return result


def registration_frame(mean: LandmarkSet, out_size=(IMAGE_SIZE, IMAGE_SIZE),
                       margin=0.25) -> AffineTransform:
    """Transform from mean-shape coordinates to output pixels.

    A fixed rectangle (landmark bounding box expanded by ``margin`` on
    every side) is mapped onto the output raster; the same rectangle
    serves every image registered against this mean.
    """
    pts = mean.points
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    pad_x = margin * (x1 - x0)
    pad_y = margin * (y1 - y0)
    x0, x1 = x0 - pad_x, x1 + pad_x
    y0, y1 = y0 - pad_y, y1 + pad_y
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise DegeneracyError("mean shape has zero extent")
    out_h, out_w = out_size
    sx = out_w / (x1 - x0)
    sy = out_h / (y1 - y0)
    return AffineTransform(np.array([[sx, 0.0, -x0 * sx], [0.0, sy, -y0 * sy]]))


def register_image(image, landmarks: LandmarkSet, mean: LandmarkSet,
                   out_size=(IMAGE_SIZE, IMAGE_SIZE), margin=0.25):
    """Warp ``image`` so its landmarks align with the mean shape.

    One resampling pass: the least-squares source-to-mean affine is
    composed with the fixed mean-to-output frame.
    """
    to_mean = fit_affine(landmarks, mean)
    frame = registration_frame(mean, out_size=out_size, margin=margin)
    return warp_affine(image, frame.compose(to_mean), out_size)


# ---------------------------------------------------------------------------
# Protocol splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    """Sample index lists for one cross-validation fold."""

    train_indices: np.ndarray
    val_indices: np.ndarray
    test_indices: np.ndarray


@dataclass(frozen=True)
class FoldSplit:
    """K subject test-groups plus the derived per-fold index lists."""

    test_groups: tuple
    folds: tuple


def kfold_subject_split(manifest: DatasetManifest, k=5, seed=0) -> FoldSplit:
    """Deal shuffled subjects round-robin into K groups.

    Fold i tests on group i, validates on group (i+1) mod K, trains on
    the rest.  Samples with a predefined usage bypass folding and join
    their designated role in every fold.
    """
    if k < 2:
        raise ConfigError(f"K must be at least 2, got {k}")
    per_subject: dict[str, list[int]] = {}
    fixed = {"train": [], "val": [], "test": []}
    for i in range(len(manifest)):
        usage = manifest.usages[i]
        if usage:
            fixed[usage].append(i)
        else:
            per_subject.setdefault(manifest.subjects[i], []).append(i)
    subjects = sorted(per_subject)
    if len(subjects) < k:
        raise DataError(f"need at least {k} distinct subjects to fold, "
                        f"have {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    groups: list[list[str]] = [[] for _ in range(k)]
    for position, subject_idx in enumerate(order):
        groups[position % k].append(subjects[subject_idx])

    folds = []
    for i in range(k):
        test_subjects = set(groups[i])
        val_subjects = set(groups[(i + 1) % k])
        roles = {"train": list(fixed["train"]), "val": list(fixed["val"]),
                 "test": list(fixed["test"])}
        for subject, indices in per_subject.items():
            if subject in test_subjects:
                roles["test"].extend(indices)
            elif subject in val_subjects:
                roles["val"].extend(indices)
            else:
                roles["train"].extend(indices)
        folds.append(Fold(
            train_indices=np.array(sorted(roles["train"]), dtype=np.int64),
            val_indices=np.array(sorted(roles["val"]), dtype=np.int64),
            test_indices=np.array(sorted(roles["test"]), dtype=np.int64),
        ))
    return FoldSplit(test_groups=tuple(tuple(g) for g in groups),
                     folds=tuple(folds))


def cross_db_split(manifest: DatasetManifest, eval_db: str):
    """Hold one database out entirely: (train manifest, test manifest)."""
    databases = set(manifest.databases)
    if eval_db not in databases:
        raise DataError(f"database {eval_db!r} not present "
                        f"(have {sorted(databases)})")
    if len(databases) < 2:
        raise DataError("cross-database split needs at least two databases")
    test_idx = np.array([i for i, d in enumerate(manifest.databases) if d == eval_db],
                        dtype=np.int64)
    train_idx = np.array([i for i, d in enumerate(manifest.databases) if d != eval_db],
                         dtype=np.int64)
    return manifest.subset(train_idx), manifest.subset(test_idx)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def make_synthetic_bars(num_samples=700, num_subjects=70, num_classes=7,
                        num_databases=1, seed=0, noise=0.04) -> DatasetManifest:
    """Oriented-bar images: one bar direction per class, plus noise.

    Class k draws a soft dark bar on a light background through the image
    center at a class-specific angle inside (0, 90) degrees; horizontal
    flips land between class clusters, so crop/flip augmentation never
    aliases one class onto another.  The light background keeps early
    rectified layers in their active range, which makes short training
    runs far less sensitive to the initial weights.  Subjects contribute
    a persistent position/thickness bias; each subject belongs to exactly
    one database.
    """
    if num_classes < 1 or num_classes > NUM_CLASSES:
        raise ConfigError(f"num_classes must be in [1, {NUM_CLASSES}]")
    if num_subjects < 1 or num_samples < 1 or num_databases < 1:
        raise ConfigError("counts must be positive")
    rng = np.random.default_rng(seed)
    angles = np.deg2rad(10.0 + np.arange(num_classes) * (150.0 / num_classes))

    subject_offset = rng.uniform(-2.0, 2.0, size=(num_subjects, 2))
    subject_thickness = rng.uniform(7.0, 9.0, size=num_subjects)

    yy, xx = np.meshgrid(np.arange(IMAGE_SIZE, dtype=np.float64),
                         np.arange(IMAGE_SIZE, dtype=np.float64), indexing="ij")

    per_subject = max(1, num_samples // num_subjects)
    images = np.empty((num_samples, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    labels = np.empty(num_samples, dtype=np.int64)
    subjects, databases = [], []
    for i in range(num_samples):
        s = min(i // per_subject, num_subjects - 1)
        k = i % num_classes
        theta = angles[k] + np.deg2rad(rng.uniform(-1.5, 1.5))
        cy = IMAGE_SIZE / 2 + subject_offset[s, 0] + rng.uniform(-1.0, 1.0)
        cx = IMAGE_SIZE / 2 + subject_offset[s, 1] + rng.uniform(-1.0, 1.0)
        thickness = subject_thickness[s] + rng.uniform(-0.4, 0.4)
        dist = np.abs((xx - cx) * np.sin(theta) - (yy - cy) * np.cos(theta))
        img = 0.92 - 0.85 * np.exp(-(dist / thickness) ** 2)
        img += noise * rng.standard_normal((IMAGE_SIZE, IMAGE_SIZE))
        images[i, 0] = np.clip(img, 0.0, 1.0)
        labels[i] = k
        db = f"SYN{s % num_databases}"
        subjects.append(f"{db}:s{s:04d}")
        databases.append(db)
    return DatasetManifest(images, labels, subjects, databases)
