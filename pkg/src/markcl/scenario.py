"""Task-incremental data: synthetic scenarios and small-image format readers.

A :class:`Scenario` is an ordered list of :class:`TaskDataset` whose
original class sets are pairwise disjoint. Labels inside a task are
remapped to ``0..C-1``; ``global_classes[label]`` recovers the original id.
"""
import gzip
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import FormatError, GenerationError, LengthError, PartitionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR100_RECORD = 3074
SPLITS = ("train", "val", "test")


@dataclass
class RawDataset:
    """Unsplit labelled samples as read from disk.

    ``is_test`` marks samples that came from a benchmark's own test file;
    when it is None a holdout is carved out by :func:`split_tasks`.
    """

    inputs: np.ndarray
    labels: np.ndarray
    is_test: Optional[np.ndarray] = None
    extra: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @staticmethod
    def concat(train: "RawDataset", test: "RawDataset") -> "RawDataset":
        flags = np.concatenate([np.zeros(len(train), bool), np.ones(len(test), bool)])
        extra = {k: np.concatenate([train.extra[k], test.extra[k]]) for k in train.extra if k in test.extra}
        return RawDataset(np.concatenate([train.inputs, test.inputs]),
                          np.concatenate([train.labels, test.labels]), flags, extra)


@dataclass
class TaskDataset:
    task_id: int
    inputs: np.ndarray
    labels: np.ndarray
    global_classes: Tuple[int, ...]
    splits: Dict[str, np.ndarray]
    sample_ids: np.ndarray

    @property
    def n_classes(self):
        return len(self.global_classes)

    def subset(self, split):
        idx = self.splits[split]
        return self.inputs[idx], self.labels[idx], self.sample_ids[idx]

    def check(self, need_val=False):
        n = len(self.labels)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise PartitionError(f"task {self.task_id}: labels outside [0, {self.n_classes})")
        allidx = np.concatenate([self.splits[s] for s in SPLITS])
        if len(allidx) != n or len(np.unique(allidx)) != n:
            raise PartitionError(f"task {self.task_id}: splits are not a disjoint cover of the samples")
        if need_val and len(self.splits["val"]) == 0:
            raise PartitionError(f"task {self.task_id}: empty validation split")


@dataclass
class Scenario:
    tasks: List[TaskDataset]

    def __post_init__(self):
        seen = set()
        for i, task in enumerate(self.tasks):
            if task.task_id != i:
                raise PartitionError(f"task ids must be 0..T-1 in order, got {task.task_id} at {i}")
            overlap = seen.intersection(task.global_classes)
            if overlap:
                raise PartitionError(f"classes {sorted(overlap)} appear in more than one task")
            seen.update(task.global_classes)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, t):
        return self.tasks[t]

    @property
    def input_shape(self):
        return tuple(self.tasks[0].inputs.shape[1:])


def _stratified(rng, labels, idx, fraction):
    """Split ``idx`` into (kept, held) with ``fraction`` of every class held out."""
    kept, held = [], []
    for c in np.unique(labels[idx]):
        members = idx[labels[idx] == c]
        members = members[rng.permutation(len(members))]
        n_held = int(round(fraction * len(members)))
        if fraction > 0 and len(members) >= 2:
            n_held = min(max(n_held, 1), len(members) - 1)
        held.append(members[:n_held])
        kept.append(members[n_held:])
    return np.sort(np.concatenate(kept)), np.sort(np.concatenate(held))


def split_tasks(raw: RawDataset, n_tasks, seed=0, order="sorted", val_fraction=0.1,
                test_fraction=0.2) -> Scenario:
    """Partition the classes of ``raw`` into ``n_tasks`` equally sized, disjoint tasks."""
    classes = np.unique(raw.labels)
    if n_tasks < 1 or len(classes) % n_tasks:
        raise PartitionError(f"{len(classes)} classes cannot be split into {n_tasks} equal tasks")
    if order == "shuffled":
        classes = classes[np.random.default_rng([seed, 0x5EED]).permutation(len(classes))]
    elif order != "sorted":
        raise PartitionError(f"unknown class order {order!r}")
    per = len(classes) // n_tasks
    tasks = []
    for t in range(n_tasks):
        group = tuple(int(c) for c in classes[t * per:(t + 1) * per])
        remap = {c: i for i, c in enumerate(group)}
        ids = np.flatnonzero(np.isin(raw.labels, group))
        labels = np.array([remap[int(c)] for c in raw.labels[ids]], dtype=np.int64)
        local = np.arange(len(ids))
        rng = np.random.default_rng([seed, t])
        if raw.is_test is not None:
            test = local[raw.is_test[ids]]
            pool = local[~raw.is_test[ids]]
        else:
            pool, test = _stratified(rng, labels, local, test_fraction)
        train, val = _stratified(rng, labels, pool, val_fraction)
        task = TaskDataset(t, raw.inputs[ids], labels, group,
                           {"train": train, "val": val, "test": test}, ids.astype(np.int64))
        task.check()
        tasks.append(task)
    return Scenario(tasks)


def gen_synthetic(n_tasks, classes_per_task, input_shape=(32,), separation=4.0, noise=1.0, seed=0,
                  samples_per_class=100, n_directions=None, max_attempts=2000) -> Scenario:
    """Gaussian-blob scenario whose class means reuse a common pool of directions.

    Each class mean is ``separation / sqrt(2)`` times the signed sum of two
    directions drawn from a shared pool, so classes of different tasks are
    built from the same ingredients. Means are rejection-sampled until every
    pair is at least ``separation`` apart. Samples are the mean plus
    isotropic noise of standard deviation ``noise``.
    """
    if separation <= 0:
        raise GenerationError("separation must be positive")
    input_shape = tuple(input_shape)
    dim = int(np.prod(input_shape))
    n_classes = n_tasks * classes_per_task
    rng = np.random.default_rng([seed, 0xDA7A])
    n_dir = n_directions or max(4, 2 * classes_per_task)
    pool = rng.normal(size=(dim, n_dir))
    if n_dir <= dim:
        pool, _ = np.linalg.qr(pool)
    else:
        pool /= np.linalg.norm(pool, axis=0, keepdims=True)
    means = []
    scale = separation / np.sqrt(2.0)
    for c in range(n_classes):
        for _ in range(max_attempts):
            i, j = rng.choice(n_dir, size=2, replace=False)
            s = rng.choice([-1.0, 1.0], size=2)
            cand = scale * (s[0] * pool[:, i] + s[1] * pool[:, j])
            if all(np.linalg.norm(cand - m) >= separation * (1 - 1e-9) for m in means):
                means.append(cand)
                break
        else:
            raise GenerationError(f"could not place class {c} at distance >= {separation} "
                                  f"in {dim} dimensions with {n_dir} directions")
    means = np.stack(means)
    labels = np.repeat(np.arange(n_classes), samples_per_class)
    x = means[labels] + noise * rng.normal(size=(len(labels), dim))
    raw = RawDataset(x.reshape((len(labels),) + input_shape).astype(np.float32), labels.astype(np.int64))
    raw.extra["means"] = means.astype(np.float32)
    return split_tasks(raw, n_tasks, seed=seed)


# -- IDX ---------------------------------------------------------------------

def _open(path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def _read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise LengthError(f"{path}: truncated IDX header")
    magic = struct.unpack_from(">I", raw, 0)[0]
    if magic != expected_magic:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0, "
                          f"expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LengthError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) != need:
        raise LengthError(f"{path}: expected {need} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path) -> RawDataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and given a channel axis."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise LengthError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None]
    return RawDataset(x, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels):
    """Write an IDX pair. Float images in [0, 1] are quantized to bytes."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, np.float64) * 255.0), 0, 255).astype(np.uint8)
    if images.ndim == 4 and images.shape[1] == 1:
        images = images[:, 0]
    labels = np.asarray(labels).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# -- CIFAR-100 binary --------------------------------------------------------

def load_cifar100(bin_path) -> RawDataset:
    """Read CIFAR-100 binary records: coarse label, fine label, 3072 CHW pixel bytes."""
    with _open(bin_path) as fh:
        raw = fh.read()
    if len(raw) % CIFAR100_RECORD:
        raise FormatError(f"{bin_path}: size {len(raw)} is not a multiple of {CIFAR100_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR100_RECORD)
    x = (rec[:, 2:].astype(np.float32) / np.float32(255.0)).reshape(-1, 3, 32, 32)
    return RawDataset(x, rec[:, 1].astype(np.int64), extra={"coarse": rec[:, 0].astype(np.int64)})


def write_cifar100(bin_path, images, fine, coarse):
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(np.asarray(images, np.float64) * 255.0), 0, 255).astype(np.uint8)
    images = images.reshape(len(images), 3072)
    rec = np.concatenate([np.asarray(coarse, np.uint8)[:, None], np.asarray(fine, np.uint8)[:, None], images], axis=1)
    with open(bin_path, "wb") as fh:
        fh.write(rec.tobytes())


def standardize(scenario: Scenario) -> Scenario:
    """Per-channel standardization with statistics from each task's train split."""
    for task in scenario:
        x = task.inputs[task.splits["train"]]
        axes = (0,) + tuple(range(2, x.ndim))
        mean = x.mean(axis=axes, keepdims=True)
        std = x.std(axis=axes, keepdims=True) + 1e-8
        task.inputs = ((task.inputs - mean[0]) / std[0]).astype(np.float32)
    return scenario


# -- checkpoint-container round trip ----------------------------------------

def scenario_to_tensors(scenario: Scenario):
    """Flatten a scenario into name -> float32 arrays (integers are exact below 2**24)."""
    out = {}
    for task in scenario:
        p = f"scenario.task{task.task_id}."
        out[p + "inputs"] = task.inputs.astype(np.float32)
        out[p + "labels"] = task.labels.astype(np.float32)
        out[p + "global_classes"] = np.asarray(task.global_classes, np.float32)
        out[p + "sample_ids"] = task.sample_ids.astype(np.float32)
        for s in SPLITS:
            out[p + "split_" + s] = task.splits[s].astype(np.float32)
    return out


def scenario_from_tensors(tensors) -> Scenario:
    tasks = []
    t = 0
    while f"scenario.task{t}.inputs" in tensors:
        p = f"scenario.task{t}."
        tasks.append(TaskDataset(
            t,
            np.array(tensors[p + "inputs"], np.float32),
            np.array(tensors[p + "labels"]).astype(np.int64),
            tuple(int(c) for c in tensors[p + "global_classes"]),
            {s: np.array(tensors[p + "split_" + s]).astype(np.int64) for s in SPLITS},
            np.array(tensors[p + "sample_ids"]).astype(np.int64),
        ))
        t += 1
    return Scenario(tasks)
