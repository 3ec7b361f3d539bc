"""Synthetic labelled clusters for the old -> new update scenario."""
from dataclasses import dataclass

import numpy as np

from .exceptions import ParseError, StructuralError, UnsupportedVersionError

DATASET_MAGIC = "ocacompat-dataset"
DATASET_VERSION = 1
_HEADER_KEYS = ("version", "input_dim", "num_classes", "split", "count")


@dataclass(eq=False)
class Dataset:
    input_dim: int
    num_classes: int
    ids: np.ndarray
    labels: np.ndarray
    X: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.X = np.asarray(self.X, dtype=np.float64).reshape(len(self.ids), self.input_dim)
        if self.split not in ("train", "eval"):
            raise StructuralError(f"split must be 'train' or 'eval', got {self.split!r}")
        if len(self.labels) != len(self.ids):
            raise StructuralError("ids and labels differ in length")
        if len(np.unique(self.ids)) != len(self.ids):
            raise StructuralError("sample ids are not unique")
        present = np.unique(self.labels)
        if len(present) != self.num_classes or (
            self.num_classes and (present[0] != 0 or present[-1] != self.num_classes - 1)
        ):
            raise StructuralError(
                f"labels must densely cover 0..{self.num_classes - 1} with every class non-empty"
            )

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.input_dim == other.input_dim
            and self.num_classes == other.num_classes
            and self.split == other.split
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.X, other.X)
        )


def gen_synthetic(
    num_classes,
    per_class_train,
    per_class_eval,
    input_dim,
    class_separation=1.0,
    noise_sigma=0.25,
    seed=0,
):
    """Isotropic Gaussian clusters around centres on a sphere.

    Returns ``(train, eval)``. Samples are ordered class by class; train ids
    run from 0 and eval ids continue after the last train id.
    """
    for name, value in (
        ("num_classes", num_classes),
        ("per_class_train", per_class_train),
        ("per_class_eval", per_class_eval),
        ("input_dim", input_dim),
    ):
        if int(value) != value or value < 1:
            raise StructuralError(f"{name} must be a positive integer, got {value}")
    if not class_separation > 0:
        raise StructuralError(f"class_separation must be > 0, got {class_separation}")
    if not noise_sigma > 0:
        raise StructuralError(f"noise_sigma must be > 0, got {noise_sigma}")

    center_ss, train_ss, eval_ss = np.random.SeedSequence(seed).spawn(3)
    centers = np.random.default_rng(center_ss).normal(size=(num_classes, input_dim))
    centers *= class_separation / np.linalg.norm(centers, axis=1, keepdims=True)

    def draw(seq, per_class, first_id, split):
        labels = np.repeat(np.arange(num_classes), per_class)
        noise = np.random.default_rng(seq).normal(scale=noise_sigma, size=(len(labels), input_dim))
        ids = np.arange(first_id, first_id + len(labels))
        return Dataset(input_dim, num_classes, ids, labels, centers[labels] + noise, split)

    train = draw(train_ss, per_class_train, 0, "train")
    evaluation = draw(eval_ss, per_class_eval, len(train), "eval")
    return train, evaluation


def restrict_classes(ds, keep):
    """Samples with ``label < keep``; ids are preserved."""
    if int(keep) != keep or not 1 <= keep <= ds.num_classes:
        raise StructuralError(f"keep must be in [1, {ds.num_classes}], got {keep}")
    mask = ds.labels < keep
    return Dataset(ds.input_dim, int(keep), ds.ids[mask], ds.labels[mask], ds.X[mask], ds.split)


def save_dataset(ds, path):
    lines = [
        DATASET_MAGIC,
        f"version={DATASET_VERSION}",
        f"input_dim={ds.input_dim}",
        f"num_classes={ds.num_classes}",
        f"split={ds.split}",
        f"count={len(ds)}",
        "---",
    ]
    for i, y, row in zip(ds.ids.tolist(), ds.labels.tolist(), ds.X.tolist()):
        lines.append(f"{i},{y}," + ",".join(map(repr, row)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != DATASET_MAGIC:
        raise ParseError("missing dataset header", f"{path}:1")
    header = {}
    lineno = 1
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "---":
            break
        key, sep, value = line.partition("=")
        if not sep or key not in _HEADER_KEYS:
            raise ParseError(f"unexpected header line {line!r}", f"{path}:{lineno}")
        header[key] = value
    else:
        raise ParseError("header is not terminated by '---'", f"{path}:{lineno}")
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise ParseError(f"header lacks {', '.join(missing)}", f"{path}:{lineno}")
    if header["version"] != str(DATASET_VERSION):
        raise UnsupportedVersionError(f"unsupported dataset version {header['version']!r}", f"{path}:2")
    try:
        input_dim = int(header["input_dim"])
        num_classes = int(header["num_classes"])
        count = int(header["count"])
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", str(path)) from None

    body = lines[lineno:]
    if len(body) != count:
        raise ParseError(f"expected {count} samples, found {len(body)}", f"{path}:{lineno + len(body)}")
    ids = np.empty(count, dtype=np.int64)
    labels = np.empty(count, dtype=np.int64)
    X = np.empty((count, input_dim))
    for k, line in enumerate(body):
        where = f"{path}:{lineno + k + 1}"
        fields = line.split(",")
        if len(fields) != input_dim + 2:
            raise ParseError(f"expected {input_dim + 2} fields, got {len(fields)}", where)
        try:
            ids[k] = int(fields[0])
            labels[k] = int(fields[1])
            X[k] = [float(v) for v in fields[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), where) from None
    try:
        return Dataset(input_dim, num_classes, ids, labels, X, header["split"])
    except StructuralError as exc:
        raise ParseError(str(exc), str(path)) from None
