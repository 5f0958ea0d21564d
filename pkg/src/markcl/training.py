"""Sequential training: KB initialization, querying, episodic KB updates and ablations.

Every stochastic choice draws from a generator keyed by ``[seed, stream,
task, ...]`` so runs are reproducible regardless of how the inner loop is
scheduled. KB parameters may only change inside :func:`init_kb`,
:func:`meta_step` and the joint phases of the baselines; every other phase
is wrapped in a digest check.
"""
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional

import numpy as np

from .errors import ContractError, DimensionError, ParameterError, SamplingError
from .model import (
    ArchConfig,
    ClassifierHead,
    FeatureExtractor,
    KnowledgeBase,
    MarkModel,
    MaskGenerator,
    TaskModules,
    count_params,
    param_digest,
)
from .numcore import SGD, SgdConfig, Tensor, backward, cross_entropy, no_grad
from .scenario import Scenario, TaskDataset

# generator stream ids
_S_MODEL, _S_FE, _S_HEAD, _S_INIT, _S_EPOCH, _S_SAMPLE, _S_RETRAIN = range(1, 8)
_PHASE_CODES = {"feature": 0, "init": 1, "query": 2, "requery": 3, "joint": 4, "inner": 5, "retrain": 6}
EVAL_BATCH = 1024


class Variant(str, Enum):
    FULL_MARK = "full_mark"
    BASELINE = "baseline"
    BASELINE_ML = "baseline_ml"
    BASELINE_MASK = "baseline_mask"
    NO_RETRAINING = "no_retraining"
    FEATURE_ONLY = "feature_only"


@dataclass(frozen=True)
class Recipe:
    init: bool = False
    masks: bool = False
    query: bool = False
    update: bool = False
    requery: bool = False
    joint: bool = False
    feature_only: bool = False


RECIPES = {
    Variant.FULL_MARK: Recipe(init=True, masks=True, query=True, update=True, requery=True),
    Variant.BASELINE: Recipe(joint=True),
    Variant.BASELINE_ML: Recipe(init=True, query=True, update=True, requery=True),
    Variant.BASELINE_MASK: Recipe(masks=True, joint=True),
    Variant.NO_RETRAINING: Recipe(init=True, masks=True, query=True, update=True),
    Variant.FEATURE_ONLY: Recipe(feature_only=True),
}

# sites allowed to change KB parameters
KB_WRITERS = frozenset({"init_kb", "meta_step", "joint"})


@dataclass(frozen=True)
class MetaConfig:
    """Episodic KB-update settings. ``H``/``h`` of None resolve per task."""

    K: int = 10
    H: Optional[int] = None
    h: Optional[int] = None
    E_inner: int = 40
    E_outer: int = 15
    inner_lr: float = 0.001
    inner_weight_decay: float = 0.0
    alpha: float = 1.0
    meta_sign: str = "reptile"
    inner_masks: bool = True
    val_batch: int = 128

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.E_inner < 1:
            raise ParameterError("E_inner must be >= 1")
        if self.E_outer < 0:
            raise ParameterError("E_outer must be >= 0")
        if self.inner_lr < 0:
            raise ParameterError("inner_lr must be >= 0")
        if self.meta_sign not in ("descent", "reptile"):
            raise ParameterError(f"meta_sign must be 'descent' or 'reptile', got {self.meta_sign!r}")
        if self.H is not None and self.H < 1:
            raise ParameterError("H must be >= 1")
        if self.h is not None and self.h < 1:
            raise ParameterError("h must be >= 1")
        if self.val_batch < 1:
            raise ParameterError("val_batch must be >= 1")

    def resolve(self, n_classes, min_class_count):
        """Concrete (H, h) for a task with ``n_classes`` classes."""
        H = self.H if self.H is not None else max(2, math.ceil(n_classes / 2))
        H = min(H, n_classes) if self.H is None else H
        if H > n_classes:
            raise ParameterError(f"H={H} exceeds the task's {n_classes} classes")
        h = self.h if self.h is not None else min(64, min_class_count)
        return H, h

    @property
    def inner_sgd(self):
        return SgdConfig(self.inner_lr, 0.0, self.inner_weight_decay)


@dataclass(frozen=True)
class TrainConfig:
    sgd: SgdConfig = SgdConfig()
    batch_size: int = 128
    epochs: int = 50
    init_epochs: Optional[int] = None
    fe_epochs: Optional[int] = None
    joint_epochs: Optional[int] = None
    retrain_epochs: Optional[int] = None
    meta: MetaConfig = MetaConfig()
    eval_splits: tuple = ("test",)
    threads: int = 1
    verify_frozen: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        for name in ("epochs", "init_epochs", "fe_epochs", "joint_epochs", "retrain_epochs"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")

    def phase_epochs(self, phase):
        override = {"init": self.init_epochs, "feature": self.fe_epochs,
                    "joint": self.joint_epochs, "retrain": self.retrain_epochs}.get(phase)
        return self.epochs if override is None else override


@dataclass
class Tracer:
    """Records which sites changed the KB or another task's modules."""

    records: List[dict] = field(default_factory=list)

    def sites_changing_kb(self):
        return sorted({r["site"] for r in self.records if r["kb_changed"]})


@dataclass
class RunResult:
    variant: str
    seed: int
    acc_matrix: np.ndarray
    events: List[dict]
    meta_log: List[dict]
    model: MarkModel
    kb_snapshots: List[Dict[str, np.ndarray]]
    counts: dict
    diagnostics: dict = field(default_factory=dict)


class _TaskData:
    """Arrays for one task plus the frozen embeddings that drive its masks."""

    def __init__(self, task: TaskDataset):
        self.task = task
        self.x = task.inputs
        self.y = task.labels
        self.ids = task.sample_ids
        self.features = None

    def split(self, name):
        return self.task.splits[name]


# -- small helpers ------------------------------------------------------------

def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def kb_digest(model: MarkModel) -> str:
    return param_digest({k: v.data for k, v in model.kb.params.items()})


def _others_digest(model: MarkModel, task):
    own = f"task{task}."
    return param_digest({k: v for k, v in model.named_tensors().items()
                         if k.startswith("task") and not k.startswith(own)})


class _frozen:
    """Temporarily drop ``requires_grad`` so frozen params get no graph nodes."""

    def __init__(self, params):
        self.params = list(params)

    def __enter__(self):
        self.prev = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad = False

    def __exit__(self, *exc):
        for p, rg in zip(self.params, self.prev):
            p.requires_grad = rg


def _guard(model, tracer, site, task, verify, fn):
    kb0 = kb_digest(model)
    oth0 = _others_digest(model, task) if task is not None else None
    out = fn()
    kb_changed = kb_digest(model) != kb0
    oth_changed = task is not None and _others_digest(model, task) != oth0
    if tracer is not None:
        tracer.records.append({"site": site, "task": task, "kb_changed": kb_changed,
                               "others_changed": oth_changed})
    if verify and kb_changed and site not in KB_WRITERS:
        raise ContractError(f"KB parameters changed during {site} of task {task}")
    if verify and oth_changed:
        raise ContractError(f"{site} of task {task} modified another task's modules")
    return out


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _fit(params, loss_fn, n, sgd, epochs, batch_size, key, on_epoch=None):
    """Plain minibatch SGD; ``loss_fn(idx)`` returns a scalar loss Tensor."""
    if n == 0 and epochs > 0:
        raise SamplingError("cannot train on an empty dataset")
    opt = SGD(params, sgd)
    for e in range(epochs):
        for idx in _batches(n, batch_size, _rng(*key, e)):
            backward(loss_fn(idx))
            opt.step()
            opt.zero_grad()
        if on_epoch is not None:
            on_epoch(e)


def _masks_const(mask_gen, features):
    with no_grad():
        return [Tensor(m.data) for m in mask_gen(Tensor(features))]


def _eval_logits(logit_fn, n):
    with no_grad():
        parts = [logit_fn(np.arange(i, min(i + EVAL_BATCH, n))).data for i in range(0, n, EVAL_BATCH)]
    return np.concatenate(parts) if parts else np.zeros((0, 1), np.float32)


def _acc_loss(logits, labels):
    if len(labels) == 0:
        return float("nan"), float("nan")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    return float(np.mean(np.argmax(logits, axis=1) == labels)), loss


def evaluate(model: MarkModel, data: _TaskData, split="test"):
    """(accuracy, mean loss) of task ``data.task.task_id`` on one split."""
    t = data.task.task_id
    idx = data.split(split)
    mods = model.task(t)
    feats = data.features

    def logit_fn(j):
        rows = idx[j]
        f = Tensor(feats[rows]) if feats is not None else None
        return model.logits(t, data.x[rows], ids=data.ids[rows], features=f if (mods.mask is not None or not mods.uses_kb) else None)

    return _acc_loss(_eval_logits(logit_fn, len(idx)), data.y[idx])


def _epoch_logger(model, data, cfg, events, phase, eval_fn=None):
    t = data.task.task_id

    def on_epoch(e):
        for split in cfg.eval_splits:
            acc, loss = eval_fn(split) if eval_fn else evaluate(model, data, split)
            events.append({"task": t, "epoch": e + 1, "phase": phase, "split": split,
                           "accuracy": acc, "loss": loss})

    return on_epoch


# -- training phases ---------------------------------------------------------

def train_feature_extractor(fe: FeatureExtractor, head: ClassifierHead, data: _TaskData, cfg: TrainConfig,
                            seed, events=None):
    """Train an extractor together with a head on its own embedding."""
    t = data.task.task_id
    train = data.split("train")

    def loss_fn(idx):
        rows = train[idx]
        return cross_entropy(head(fe(data.x[rows], ids=data.ids[rows], training=True)), data.y[rows])

    def eval_fn(split):
        idx = data.split(split)
        return _acc_loss(_eval_logits(
            lambda j: head(fe(data.x[idx[j]], ids=data.ids[idx[j]], training=False)), len(idx)), data.y[idx])

    hook = _epoch_logger(None, data, cfg, events, "feature", eval_fn) if events is not None else None
    _fit(fe.trainable() + list(head.params.values()), loss_fn, len(train), cfg.sgd,
         cfg.phase_epochs("feature"), cfg.batch_size, (seed, _S_EPOCH, _PHASE_CODES["feature"], t), hook)


def init_kb(kb: KnowledgeBase, data: _TaskData, cfg: TrainConfig, seed, events=None):
    """End-to-end training of the KB with a temporary head, no masks. Returns train accuracy."""
    train = data.split("train")
    if len(train) == 0:
        raise SamplingError("init_kb needs a non-empty first task")
    head = ClassifierHead(kb.arch.trunk_dim, data.task.n_classes, _rng(seed, _S_INIT))

    def loss_fn(idx):
        rows = train[idx]
        return cross_entropy(head(kb(Tensor(data.x[rows]))), data.y[rows])

    def eval_fn(split):
        idx = data.split(split)
        return _acc_loss(_eval_logits(lambda j: head(kb(Tensor(data.x[idx[j]]))), len(idx)), data.y[idx])

    hook = _epoch_logger(None, data, cfg, events, "init", eval_fn) if events is not None else None
    _fit(list(kb.params.values()) + list(head.params.values()), loss_fn, len(train), cfg.sgd,
         cfg.phase_epochs("init"), cfg.batch_size, (seed, _S_EPOCH, _PHASE_CODES["init"], data.task.task_id), hook)
    return eval_fn("train")[0]


def query_phase(model: MarkModel, data: _TaskData, cfg: TrainConfig, seed, events=None, phase="query", epochs=None):
    """Train the task's mask generator and head against a frozen KB."""
    t = data.task.task_id
    mods = model.task(t)
    train = data.split("train")
    trainable = list(mods.head.params.values())
    if mods.mask is not None:
        trainable = list(mods.mask.params.values()) + trainable

    def loss_fn(idx):
        rows = train[idx]
        f = Tensor(data.features[rows]) if mods.mask is not None else None
        return cross_entropy(model.logits(t, data.x[rows], features=f), data.y[rows])

    hook = _epoch_logger(model, data, cfg, events, phase) if events is not None else None
    n_epochs = cfg.phase_epochs(phase) if epochs is None else epochs
    with _frozen(model.kb.params.values()):
        _fit(trainable, loss_fn, len(train), cfg.sgd, n_epochs, cfg.batch_size,
             (seed, _S_EPOCH, _PHASE_CODES.get(phase, 9), t), hook)


def joint_phase(model: MarkModel, data: _TaskData, cfg: TrainConfig, seed, events=None):
    """Baseline training: KB, head and (if present) mask generator together."""
    t = data.task.task_id
    mods = model.task(t)
    train = data.split("train")
    trainable = list(model.kb.params.values()) + list(mods.head.params.values())
    if mods.mask is not None:
        trainable += list(mods.mask.params.values())

    def loss_fn(idx):
        rows = train[idx]
        f = Tensor(data.features[rows]) if mods.mask is not None else None
        return cross_entropy(model.logits(t, data.x[rows], features=f), data.y[rows])

    hook = _epoch_logger(model, data, cfg, events, "joint") if events is not None else None
    _fit(trainable, loss_fn, len(train), cfg.sgd, cfg.phase_epochs("joint"), cfg.batch_size,
         (seed, _S_EPOCH, _PHASE_CODES["joint"], t), hook)


# -- KB update ---------------------------------------------------------------

def sample_minitasks(task: TaskDataset, meta: MetaConfig, seed):
    """K mini-tasks of H classes x h train instances, each with its own validation batch.

    Indices are task-local sample positions. Returns ``(minis, val_batches)``.
    """
    train, val = task.splits["train"], task.splits["val"]
    labels = task.labels
    members = [train[labels[train] == c] for c in range(task.n_classes)]
    H, h = meta.resolve(task.n_classes, min(len(m) for m in members))
    if len(val) == 0:
        raise SamplingError(f"task {task.task_id} has an empty validation split")
    rng = _rng(*np.atleast_1d(seed))
    minis, vals = [], []
    for _ in range(meta.K):
        classes = np.sort(rng.choice(task.n_classes, size=H, replace=False))
        parts = []
        for c in classes:
            if len(members[c]) < h:
                raise SamplingError(f"class {task.global_classes[c]} of task {task.task_id} has "
                                    f"{len(members[c])} training instances, need h={h}")
            parts.append(rng.choice(members[c], size=h, replace=False))
        minis.append(np.concatenate(parts))
        vals.append(rng.choice(val, size=min(meta.val_batch, len(val)), replace=False))
    return minis, vals


def inner_train(kb_copy: KnowledgeBase, head_copy: ClassifierHead, x, y, masks, meta: MetaConfig,
                batch_size, key):
    """E_inner epochs of momentum-free SGD on deep copies; ``masks`` are constants."""
    def loss_fn(idx):
        m = [Tensor(mm.data[idx]) for mm in masks] if masks is not None else None
        return cross_entropy(head_copy(kb_copy(Tensor(x[idx]), m)), y[idx])

    params = list(kb_copy.params.values()) + list(head_copy.params.values())
    if meta.inner_lr == 0:
        return kb_copy, head_copy
    _fit(params, loss_fn, len(y), meta.inner_sgd, meta.E_inner, batch_size, key)
    return kb_copy, head_copy


def compute_gamma(accs):
    """Accuracy-proportional weights; uniform when every accuracy is zero."""
    accs = np.asarray(accs, dtype=np.float64)
    total = accs.sum()
    if total <= 0:
        return np.full(len(accs), 1.0 / len(accs))
    return accs / total


def _as_arrays(params):
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}


def aggregate_delta(original, copies, gamma, e_inner):
    """(1/E_inner) * sum_k gamma_k (copy_k - original), summed in index order, in float64."""
    base = _as_arrays(original.params if isinstance(original, KnowledgeBase) else original)
    delta = {}
    for name, w0 in base.items():
        acc = np.zeros(w0.shape, np.float64)
        w0 = w0.astype(np.float64)
        for g, cp in zip(gamma, copies):
            w = _as_arrays(cp.params if isinstance(cp, KnowledgeBase) else cp)[name]
            if w.shape != w0.shape:
                raise DimensionError(f"copy of {name} has shape {w.shape}, expected {w0.shape}")
            acc += float(g) * (w.astype(np.float64) - w0)
        delta[name] = acc / e_inner
    return delta


def meta_step(kb: KnowledgeBase, delta, alpha, meta_sign="reptile"):
    """Move the KB along ``delta``: forward for ``reptile``, backward for ``descent``."""
    sign = 1.0 if meta_sign == "reptile" else -1.0
    for name, p in kb.params.items():
        d = delta[name]
        if d.shape != p.data.shape:
            raise DimensionError(f"delta for {name} has shape {d.shape}, expected {p.data.shape}")
        p.data = (p.data.astype(np.float64) + sign * alpha * d).astype(p.data.dtype)


def kb_update(model: MarkModel, data: _TaskData, cfg: TrainConfig, seed, tracer=None, meta_log=None):
    """Episodic update of the shared KB from mini-tasks of the current task."""
    meta = cfg.meta
    t = data.task.task_id
    mods = model.task(t)
    guard = lambda site, fn: _guard(model, tracer, site, t, cfg.verify_frozen, fn)  # noqa: E731
    use_masks = meta.inner_masks and mods.mask is not None
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for outer in range(meta.E_outer):
            minis, vals = guard("sample_minitasks", lambda: sample_minitasks(data.task, meta, (seed, _S_SAMPLE, t, outer)))

            def adapt(k):
                rows = minis[k]
                masks = _masks_const(mods.mask, data.features[rows]) if use_masks else None
                return inner_train(model.kb.clone(), mods.head.clone(), data.x[rows], data.y[rows], masks, meta,
                                   cfg.batch_size, (seed, _S_EPOCH, _PHASE_CODES["inner"], t, outer, k))

            copies = guard("inner_train", lambda: list(pool.map(adapt, range(meta.K)) if pool else map(adapt, range(meta.K))))

            def score():
                accs = []
                for (kb_k, head_k), rows in zip(copies, vals):
                    masks = _masks_const(mods.mask, data.features[rows]) if use_masks else None
                    with no_grad():
                        logits = head_k(kb_k(Tensor(data.x[rows]), masks)).data
                    accs.append(float(np.mean(np.argmax(logits, 1) == data.y[rows])))
                return accs

            accs = guard("evaluate_copies", score)
            gamma = compute_gamma(accs)
            delta = aggregate_delta(model.kb, [c[0] for c in copies], gamma, meta.E_inner)
            guard("meta_step", lambda: meta_step(model.kb, delta, meta.alpha, meta.meta_sign))
            if meta_log is not None:
                meta_log.append({"task": t, "outer": outer + 1, "copy_accuracy": accs,
                                 "gamma": [float(g) for g in gamma],
                                 "delta_norm": float(np.sqrt(sum(float((d * d).sum()) for d in delta.values())))})
    finally:
        if pool is not None:
            pool.shutdown()


# -- full sequence ------------------------------------------------------------

def _build_model(arch: ArchConfig, seed, table=None):
    kb = KnowledgeBase(arch, _rng(seed, _S_MODEL))
    shared = None
    if arch.fe_variant == "random":
        shared = FeatureExtractor(arch, "random", _rng(seed, _S_FE, 0))
    elif arch.fe_variant == "external_embedding":
        shared = FeatureExtractor(arch, "external_embedding", table=table)
    return MarkModel(arch, kb, shared)


def _precompute_features(fe: FeatureExtractor, data: _TaskData):
    n = len(data.y)
    with no_grad():
        parts = [fe(data.x[i:i + EVAL_BATCH], ids=data.ids[i:i + EVAL_BATCH], training=False).data
                 for i in range(0, n, EVAL_BATCH)]
    data.features = np.concatenate(parts) if parts else np.zeros((0, fe.embed_dim), np.float32)


def train_sequence(scenario: Scenario, cfg: TrainConfig, arch: ArchConfig, variant="full_mark", seed=0,
                   table=None, tracer: Optional[Tracer] = None) -> RunResult:
    """Train every task in order and fill the accuracy matrix after each one."""
    variant = Variant(variant)
    recipe = RECIPES[variant]
    if tuple(scenario.input_shape) != tuple(arch.input_shape):
        raise DimensionError(f"scenario inputs {scenario.input_shape} do not match architecture {arch.input_shape}")
    T = len(scenario)
    model = _build_model(arch, seed, table)
    datas = [_TaskData(task) for task in scenario]
    acc = np.full((T, T), np.nan)
    events, meta_log, snapshots = [], [], []
    diag = {"init_train_accuracy": None, "query_accuracy": {}, "requery_accuracy": {}}

    def guard(site, t, fn):
        return _guard(model, tracer, site, t, cfg.verify_frozen, fn)

    def snapshot():
        snapshots.append({k: v.data.copy() for k, v in model.kb.params.items()})

    for t, data in enumerate(datas):
        snapshot()
        rng_head = _rng(seed, _S_HEAD, t)
        n_classes = data.task.n_classes

        needs_fe = recipe.masks or recipe.feature_only
        fe = None
        if needs_fe and arch.fe_variant == "task_trained":
            fe = FeatureExtractor(arch, "task_trained", _rng(seed, _S_FE, t + 1))
            fe_head = ClassifierHead(fe.embed_dim, n_classes, _rng(seed, _S_HEAD, t, 1))
            guard("feature", t, lambda: train_feature_extractor(fe, fe_head, data, cfg, seed, events))
            fe.freeze()
        if recipe.feature_only:
            if fe is None:
                fe_head = ClassifierHead(model.shared_fe.embed_dim, n_classes, _rng(seed, _S_HEAD, t, 1))
                data_fe = model.shared_fe
                guard("feature", t, lambda: train_feature_extractor(data_fe, fe_head, data, cfg, seed, events))
            model.tasks[t] = TaskModules(fe_head, None, fe, uses_kb=False)
        else:
            mask = MaskGenerator(arch.embed_dim, arch.block_channels, arch.mask_bias, _rng(seed, _S_HEAD, t, 2)) \
                if recipe.masks else None
            model.tasks[t] = TaskModules(ClassifierHead(arch.trunk_dim, n_classes, rng_head), mask, fe)
            if recipe.masks:
                _precompute_features(model.feature_extractor(t), data)

            if recipe.init and t == 0:
                diag["init_train_accuracy"] = guard("init_kb", t, lambda: init_kb(model.kb, data, cfg, seed, events))
            if recipe.joint:
                guard("joint", t, lambda: joint_phase(model, data, cfg, seed, events))
            if recipe.query:
                guard("query", t, lambda: query_phase(model, data, cfg, seed, events, "query"))
                diag["query_accuracy"][t] = evaluate(model, data, "test")[0]
            if recipe.update:
                kb_update(model, data, cfg, seed, tracer, meta_log)
            if recipe.requery:
                guard("requery", t, lambda: query_phase(model, data, cfg, seed, events, "requery"))
                diag["requery_accuracy"][t] = evaluate(model, data, "test")[0]

        for j in range(t + 1):
            acc[t, j] = evaluate(model, datas[j], "test")[0]
    snapshot()
    return RunResult(variant.value, seed, acc, events, meta_log, model, snapshots, count_params(model), diag)


def task_data(scenario: Scenario, model: MarkModel):
    """Per-task arrays with embeddings precomputed for tasks that use masks."""
    out = []
    for task in scenario:
        d = _TaskData(task)
        mods = model.tasks.get(task.task_id)
        if mods is not None and (mods.mask is not None or not mods.uses_kb):
            _precompute_features(model.feature_extractor(task.task_id), d)
        out.append(d)
    return out


def with_meta(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, meta=replace(cfg.meta, **changes))
