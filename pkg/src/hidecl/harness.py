"""Task streams, synthetic data, embedding files, and the three
continual-learning metrics (final/cumulative average accuracy and the
final forgetting measure).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .numerics import Adam, softmax_cross_entropy_batch

CIL, DIL, TIL = "CIL", "DIL", "TIL"
SETTINGS = (CIL, DIL, TIL)

EMB_MAGIC = b"HEMB1"


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def classes(self) -> tuple[int, ...]:
        return tuple(sorted(int(c) for c in np.unique(self.train_y)))


@dataclass
class TaskData:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    classes: tuple[int, ...]


@dataclass
class TaskStream:
    setting: str
    tasks: list[TaskData]

    @property
    def T(self) -> int:
        return len(self.tasks)


def synth_dataset(n_classes: int, per_class: int, image_size: int = 32,
                  channels: int = 3, noise: float = 0.08, shift: int = 2,
                  seed: int = 0) -> Dataset:
    """Template-plus-noise images: one fixed smooth random template per
    class, gaussian pixel noise, and random circular shifts. 80/20 split.

    Templates are low-pass filtered so small shifts keep samples of a
    class correlated; raw pixels stay linearly separable at low noise.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    templates = []
    for _ in range(n_classes):
        t = gaussian_filter(
            rng.uniform(0.0, 1.0, size=(image_size, image_size, channels)),
            sigma=(2.0, 2.0, 0.0))
        templates.append((t - t.min()) / max(t.max() - t.min(), 1e-9))
    xs, ys = [], []
    for c in range(n_classes):
        for _ in range(per_class):
            img = templates[c]
            if shift > 0:
                dx, dy = rng.integers(-shift, shift + 1, size=2)
                img = np.roll(np.roll(img, dx, axis=0), dy, axis=1)
            img = img + noise * rng.standard_normal(img.shape)
            xs.append(np.clip(img, 0.0, 1.0))
            ys.append(c)
    x = np.array(xs, dtype=np.float32)
    y = np.array(ys, dtype=np.intp)
    n_test = max(1, round(0.2 * per_class))
    train_idx, test_idx = [], []
    for c in range(n_classes):
        idx = np.flatnonzero(y == c)
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx, test_idx = np.array(train_idx), np.array(test_idx)
    return Dataset(x[train_idx], y[train_idx], x[test_idx], y[test_idx])


def _dil_transform(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One fixed domain shift: channel remix, additive noise, optional blur."""
    c = x.shape[-1]
    perm = rng.permutation(c)
    scale = rng.uniform(0.6, 1.0, size=c)
    sigma = rng.uniform(0.02, 0.1)
    out = x[..., perm] * scale + sigma * rng.standard_normal(x.shape)
    if rng.random() < 0.5:  # 3x3 box blur
        blurred = np.copy(out)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx or dy:
                    blurred += np.roll(np.roll(out, dx, axis=1), dy, axis=2)
        out = blurred / 9.0
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_stream(dataset: Dataset, setting: str, T: int, seed: int = 0) -> TaskStream:
    """Split a dataset into a task stream.

    CIL/TIL: seeded random partition of the classes into T disjoint sets,
    remainder classes going to the final task. DIL: every task sees all
    classes under a fixed per-task domain shift.
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    classes = dataset.classes
    if T < 1:
        raise ValueError("need at least one task")
    rng = np.random.default_rng(seed)

    if setting == DIL:
        tasks = []
        for t in range(T):
            if t == 0:
                tx, sx = dataset.train_x, dataset.test_x
            else:
                sub = np.random.default_rng(seed + 1000 + t)
                tx = _dil_transform(dataset.train_x, sub)
                sub = np.random.default_rng(seed + 1000 + t)
                sx = _dil_transform(dataset.test_x, sub)
            tasks.append(TaskData(tx, dataset.train_y.copy(), sx,
                                  dataset.test_y.copy(), classes))
        return TaskStream(DIL, tasks)

    if T > len(classes):
        raise ValueError(f"cannot split {len(classes)} classes into {T} tasks")
    order = rng.permutation(len(classes))
    per = len(classes) // T
    groups = [order[i * per:(i + 1) * per] for i in range(T)]
    groups[-1] = np.concatenate([groups[-1], order[T * per:]])
    tasks = []
    for g in groups:
        cset = tuple(sorted(int(classes[i]) for i in g))
        tr = np.isin(dataset.train_y, cset)
        te = np.isin(dataset.test_y, cset)
        tasks.append(TaskData(dataset.train_x[tr], dataset.train_y[tr],
                              dataset.test_x[te], dataset.test_y[te], cset))
    return TaskStream(setting, tasks)


# -- embedding files ----------------------------------------------------------


class EmbeddingParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_embeddings(path, vectors: np.ndarray, labels: np.ndarray) -> None:
    """Write (vector, label) rows in the HEMB1 format (f32 little-endian)."""
    vectors = np.asarray(vectors, dtype="<f4")
    labels = np.asarray(labels)
    if vectors.ndim != 2 or len(vectors) != len(labels):
        raise ValueError("need [N, D] vectors and N labels")
    out = [EMB_MAGIC, struct.pack("<II", len(vectors), vectors.shape[1])]
    for vec, lab in zip(vectors, labels):
        out.append(struct.pack("<I", int(lab)))
        out.append(vec.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an HEMB1 file into (vectors [N, D] float32, labels [N])."""
    data = Path(path).read_bytes()
    if len(data) < len(EMB_MAGIC) or data[: len(EMB_MAGIC)] != EMB_MAGIC:
        raise EmbeddingParseError("missing HEMB1 magic", 0)
    pos = len(EMB_MAGIC)
    if pos + 8 > len(data):
        raise EmbeddingParseError("truncated header", pos)
    count, dim = struct.unpack_from("<II", data, pos)
    pos += 8
    if dim == 0:
        raise EmbeddingParseError("zero dimension", pos - 4)
    row = 4 + 4 * dim
    vectors = np.empty((count, dim), dtype=np.float32)
    labels = np.empty(count, dtype=np.intp)
    for i in range(count):
        if pos + row > len(data):
            raise EmbeddingParseError(f"truncated row {i}", pos)
        (labels[i],) = struct.unpack_from("<I", data, pos)
        vectors[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos + 4)
        pos += row
    if pos != len(data):
        raise EmbeddingParseError("trailing bytes after last row", pos)
    return vectors, labels


def embedding_dataset(vectors: np.ndarray, labels: np.ndarray,
                      test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Wrap loaded embeddings as a Dataset with a per-class split."""
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, round(test_fraction * len(idx)))
        test_idx.extend(idx[:k])
        train_idx.extend(idx[k:])
    tr, te = np.array(train_idx), np.array(test_idx)
    return Dataset(vectors[tr], labels[tr], vectors[te], labels[te])


# -- evaluation ----------------------------------------------------------------


def accuracy_matrix(model, stream: TaskStream,
                    snapshot_dir: str | None = None) -> np.ndarray:
    """Train incrementally and fill A[i][t] = accuracy on task i+1's test
    set right after task t+1. Entries are exact correct/total ratios;
    the upper triangle stays NaN.

    With `snapshot_dir`, the model is checkpointed after each task so a
    replay oracle can re-evaluate from disk.
    """
    T = stream.T
    a = np.full((T, T), np.nan)
    for t, task in enumerate(stream.tasks, start=1):
        model.train_task(t, task.train_x, task.train_y)
        if snapshot_dir is not None:
            model.save(Path(snapshot_dir) / f"task_{t}.hide")
        for i in range(1, t + 1):
            a[i - 1, t - 1] = evaluate_accuracy(model, stream, i)
    return a


def evaluate_accuracy(model, stream: TaskStream, i: int) -> float:
    """Accuracy of `model` on task i's test set under the stream setting."""
    task = stream.tasks[i - 1]
    if stream.setting == TIL:
        pred = model.predict_til(task.test_x, i)
    else:
        _, pred = model.predict_batch(task.test_x)
    return int(np.sum(pred == task.test_y)) / len(task.test_y)


def metrics(a: np.ndarray) -> tuple[float, float, float | None]:
    """(FAA, CAA, FFM) from a lower-triangular accuracy matrix.

    AA_t averages the first t entries of column t; FAA is AA_T, CAA the
    mean of all AA_t, and FFM averages each task's worst drop from its
    best pre-final accuracy. FFM is None for a single task.
    """
    a = np.asarray(a, dtype=np.float64)
    T = a.shape[0]
    if a.shape != (T, T):
        raise ValueError("accuracy matrix must be square")
    aa = np.array([a[: t + 1, t].mean() for t in range(T)])
    faa = float(aa[-1])
    caa = float(aa.mean())
    if T == 1:
        return faa, caa, None
    # per task: best accuracy over columns i..T-2 minus the final accuracy
    terms = [float(np.max(a[i, i:T - 1]) - a[i, T - 1]) for i in range(T - 1)]
    ffm = float(np.mean(terms))
    return faa, caa, ffm


def linear_probe_accuracy(train_x: np.ndarray, train_y: np.ndarray,
                          test_x: np.ndarray, test_y: np.ndarray,
                          epochs: int = 30, lr: float = 0.01,
                          seed: int = 0) -> float:
    """Softmax regression on flattened inputs; a separability yardstick."""
    rng = np.random.default_rng(seed)
    xtr = train_x.reshape(len(train_x), -1).astype(np.float64)
    xte = test_x.reshape(len(test_x), -1).astype(np.float64)
    k = int(max(train_y.max(), test_y.max())) + 1
    w = np.zeros((xtr.shape[1], k))
    b = np.zeros(k)
    opt = Adam(lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(xtr))
        for start in range(0, len(xtr), 64):
            idx = order[start:start + 64]
            logits = xtr[idx] @ w + b
            _, dlog = softmax_cross_entropy_batch(logits, train_y[idx])
            new = opt.update({"w": w, "b": b},
                             {"w": xtr[idx].T @ dlog, "b": dlog.sum(axis=0)})
            w, b = new["w"], new["b"]
    pred = (xte @ w + b).argmax(axis=1)
    return float(np.mean(pred == test_y))
