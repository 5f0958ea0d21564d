"""MARK architecture: feature extractors, mask generators, the masked
knowledge base (KB) and per-task classifier heads.

Data flow for an input ``x`` of task ``t``::

    features = F_t(x)                 # frozen embedding
    masks    = relu(features @ W + b) # one gate per KB channel, split per block
    trunk    = KB(x, masks)           # conv -> relu -> gate -> pool, per block
    logits   = C_t(trunk)
"""
import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import DimensionError, EmbeddingLookupError, FormatError, LengthError, MissingTaskError, ParameterError
from .numcore import (
    BatchNormState,
    Tensor,
    batchnorm_forward,
    conv2d_forward,
    dense_forward,
    flatten,
    maxpool2d,
    modulate,
    no_grad,
    relu,
    split_columns,
)

FE_VARIANTS = ("task_trained", "random", "external_embedding")
EMBEDDING_MAGIC = b"MARKEMB1"


@dataclass(frozen=True)
class ArchConfig:
    """Shapes of every component.

    ``mode="dense"`` swaps the KB conv blocks for dense blocks whose hidden
    units are gated by the masks; ``fe_channels`` is then the hidden width of
    the feature-extractor MLP.
    """

    mode: str = "conv"
    input_shape: tuple = (3, 32, 32)
    block_channels: tuple = (64, 128, 256)
    kernel_size: int = 3
    padding: int = 0
    pool_window: int = 2
    trunk_dim: int = 256
    embed_dim: int = 128
    fe_variant: str = "task_trained"
    fe_channels: int = 32
    fe_kernel_size: int = 3
    mask_bias: bool = True

    def __post_init__(self):
        if self.mode not in ("conv", "dense"):
            raise ParameterError(f"unknown architecture mode {self.mode!r}")
        if self.fe_variant not in FE_VARIANTS:
            raise ParameterError(f"unknown feature extractor variant {self.fe_variant!r}")
        if not self.block_channels or any(c < 1 for c in self.block_channels):
            raise ParameterError("block_channels must be a non-empty list of positive ints")
        if self.mode == "conv" and len(self.input_shape) != 3:
            raise ParameterError("conv mode needs input_shape (C, H, W)")

    @property
    def mask_width(self):
        return sum(self.block_channels)

    @property
    def input_size(self):
        return int(np.prod(self.input_shape))


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


def _conv_out(size, k, padding, pool):
    size = size + 2 * padding - k + 1
    if size < 1:
        raise DimensionError("input too small for the configured conv stack")
    size //= pool
    if size < 1:
        raise DimensionError("input too small for the configured pooling")
    return size


class KnowledgeBase:
    """Shared block stack plus the trunk projection feeding every head."""

    def __init__(self, arch: ArchConfig, rng=None, params: Optional[Dict[str, Tensor]] = None):
        self.arch = arch
        self.params = params if params is not None else self._init(rng or np.random.default_rng(0))

    @property
    def block_channels(self):
        return list(self.arch.block_channels)

    def trunk_input_size(self):
        a = self.arch
        if a.mode == "dense":
            return a.block_channels[-1]
        h, w = a.input_shape[1], a.input_shape[2]
        for _ in a.block_channels:
            h = _conv_out(h, a.kernel_size, a.padding, a.pool_window)
            w = _conv_out(w, a.kernel_size, a.padding, a.pool_window)
        return a.block_channels[-1] * h * w

    def _init(self, rng):
        a, p = self.arch, {}
        if a.mode == "conv":
            cin, k = a.input_shape[0], a.kernel_size
            for b, c in enumerate(a.block_channels):
                p[f"block{b}.weight"] = _uniform(rng, (c, cin, k, k), cin * k * k)
                p[f"block{b}.bias"] = _uniform(rng, (c,), cin * k * k)
                cin = c
        else:
            fin = a.input_size
            for b, c in enumerate(a.block_channels):
                p[f"block{b}.weight"] = _uniform(rng, (fin, c), fin)
                p[f"block{b}.bias"] = _uniform(rng, (c,), fin)
                fin = c
        tin = self.trunk_input_size()
        p["trunk.weight"] = _uniform(rng, (tin, a.trunk_dim), tin)
        p["trunk.bias"] = _uniform(rng, (a.trunk_dim,), tin)
        return p

    def block_names(self, b):
        return [f"block{b}.weight", f"block{b}.bias"]

    def forward(self, x: Tensor, masks: Optional[List[Tensor]] = None) -> Tensor:
        a, p = self.arch, self.params
        nblocks = len(a.block_channels)
        if masks is not None:
            if len(masks) != nblocks:
                raise DimensionError(f"expected {nblocks} masks, got {len(masks)}")
            for m, c in zip(masks, a.block_channels):
                if m.shape[-1] != c:
                    raise DimensionError(f"mask width {m.shape[-1]} != block channels {c}")
        h = x
        if a.mode == "dense" and h.data.ndim > 2:
            h = flatten(h)
        for b in range(nblocks):
            w, bias = p[f"block{b}.weight"], p[f"block{b}.bias"]
            if a.mode == "conv":
                h = relu(conv2d_forward(h, w, bias, padding=a.padding))
                if masks is not None:
                    h = modulate(h, masks[b])
                h = maxpool2d(h, a.pool_window)
            else:
                h = relu(dense_forward(h, w, bias))
                if masks is not None:
                    h = modulate(h, masks[b])
        if a.mode == "conv":
            h = flatten(h)
        return relu(dense_forward(h, p["trunk.weight"], p["trunk.bias"]))

    __call__ = forward

    def clone(self):
        return KnowledgeBase(self.arch, params={k: v.copy() for k, v in self.params.items()})


class MaskGenerator:
    """Linear map + ReLU from an embedding to one gate per KB channel.

    Starts from zero weights and unit bias so an untrained generator is the
    identity modulation. With ``bias=False`` the map is bias-free and the
    weights start small and positive instead.
    """

    def __init__(self, embed_dim, block_channels, bias=True, rng=None, params=None):
        self.block_channels = list(block_channels)
        width = sum(self.block_channels)
        if params is not None:
            self.params = params
        elif bias:
            self.params = {
                "weight": Tensor(np.zeros((embed_dim, width), np.float32), requires_grad=True),
                "bias": Tensor(np.ones(width, np.float32), requires_grad=True),
            }
        else:
            rng = rng or np.random.default_rng(0)
            w = rng.uniform(0.0, 2.0 / embed_dim, size=(embed_dim, width)).astype(np.float32)
            self.params = {"weight": Tensor(w, requires_grad=True)}

    @property
    def embed_dim(self):
        return self.params["weight"].shape[0]

    def forward(self, features: Tensor) -> List[Tensor]:
        w = self.params["weight"]
        if features.data.ndim != 2 or features.shape[1] != w.shape[0]:
            raise DimensionError(f"features {features.shape} do not match mask input width {w.shape[0]}")
        b = self.params.get("bias")
        if b is None:
            b = Tensor(np.zeros(w.shape[1], np.float32))
        return split_columns(relu(dense_forward(features, w, b)), self.block_channels)

    __call__ = forward

    def clone(self):
        return MaskGenerator(self.embed_dim, self.block_channels,
                             params={k: v.copy() for k, v in self.params.items()})


class ClassifierHead:
    def __init__(self, in_dim=None, n_classes=None, rng=None, params=None):
        if params is None:
            rng = rng or np.random.default_rng(0)
            params = {"weight": _uniform(rng, (in_dim, n_classes), in_dim),
                      "bias": _uniform(rng, (n_classes,), in_dim)}
        self.params = params

    @property
    def n_classes(self):
        return self.params["weight"].shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(x, self.params["weight"], self.params["bias"])

    __call__ = forward

    def clone(self):
        return ClassifierHead(params={k: v.copy() for k, v in self.params.items()})


class FeatureExtractor:
    """Produces the embedding that drives a task's mask generator.

    ``task_trained`` and ``random`` share an architecture (two conv blocks
    with ReLU, batch norm and pooling, then a dense+ReLU layer; a two-layer
    MLP in dense mode). ``external_embedding`` is a lookup into a table of
    precomputed vectors indexed by sample position.
    """

    def __init__(self, arch: ArchConfig, variant=None, rng=None, params=None, table=None, bn_states=None):
        self.arch = arch
        self.variant = variant or arch.fe_variant
        self.frozen = self.variant == "random"
        self.table = table
        self.bn_states = bn_states or []
        if self.variant == "external_embedding":
            if table is None:
                raise ParameterError("external_embedding extractor needs an embedding table")
            self.params = {}
            return
        if params is not None:
            self.params = params
            return
        rng = rng or np.random.default_rng(0)
        a, p = arch, {}
        if a.mode == "conv":
            cin, k, c = a.input_shape[0], a.fe_kernel_size, a.fe_channels
            h, w = a.input_shape[1], a.input_shape[2]
            for i in range(2):
                p[f"conv{i}.weight"] = _uniform(rng, (c, cin, k, k), cin * k * k)
                p[f"conv{i}.bias"] = _uniform(rng, (c,), cin * k * k)
                p[f"bn{i}.gamma"] = Tensor(np.ones(c, np.float32), requires_grad=True)
                p[f"bn{i}.beta"] = Tensor(np.zeros(c, np.float32), requires_grad=True)
                self.bn_states.append(BatchNormState.fresh(c))
                h = _conv_out(h, k, 0, a.pool_window)
                w = _conv_out(w, k, 0, a.pool_window)
                cin = c
            fin = c * h * w
        else:
            fin = a.input_size
            p["hidden.weight"] = _uniform(rng, (fin, a.fe_channels), fin)
            p["hidden.bias"] = _uniform(rng, (a.fe_channels,), fin)
            fin = a.fe_channels
        p["fc.weight"] = _uniform(rng, (fin, a.embed_dim), fin)
        p["fc.bias"] = _uniform(rng, (a.embed_dim,), fin)
        self.params = p

    @property
    def embed_dim(self):
        if self.variant == "external_embedding":
            return self.table.shape[1]
        return self.params["fc.weight"].shape[1]

    def trainable(self):
        return [] if self.frozen else list(self.params.values())

    def forward(self, x, ids=None, training=False) -> Tensor:
        if self.variant == "external_embedding":
            if ids is None:
                ids = x.data if isinstance(x, Tensor) else x
            return self.lookup(ids)
        training = training and not self.frozen
        a, p = self.arch, self.params
        h = x if isinstance(x, Tensor) else Tensor(x)
        if a.mode == "conv":
            for i in range(2):
                h = relu(conv2d_forward(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"]))
                h = batchnorm_forward(h, p[f"bn{i}.gamma"], p[f"bn{i}.beta"], self.bn_states[i], training)
                h = maxpool2d(h, a.pool_window)
            h = flatten(h)
        else:
            if h.data.ndim > 2:
                h = flatten(h)
            h = relu(dense_forward(h, p["hidden.weight"], p["hidden.bias"]))
        return relu(dense_forward(h, p["fc.weight"], p["fc.bias"]))

    __call__ = forward

    def lookup(self, ids) -> Tensor:
        ids = np.asarray(ids).astype(np.int64).reshape(-1)
        n = self.table.shape[0]
        bad = ids[(ids < 0) | (ids >= n)]
        if bad.size:
            raise EmbeddingLookupError(f"embedding index {int(bad[0])} out of range [0, {n})")
        return Tensor(self.table[ids])

    def freeze(self):
        self.frozen = True

    def clone(self):
        fe = FeatureExtractor(self.arch, self.variant, params={k: v.copy() for k, v in self.params.items()},
                              table=self.table,
                              bn_states=[BatchNormState(s.running_mean.copy(), s.running_var.copy())
                                         for s in self.bn_states])
        fe.frozen = self.frozen
        return fe


@dataclass
class TaskModules:
    """Per-task components. ``fe`` is None when the model's shared extractor is used.

    ``uses_kb=False`` marks the feature-only ablation, where ``head`` sits
    directly on the embedding.
    """

    head: ClassifierHead
    mask: Optional[MaskGenerator] = None
    fe: Optional[FeatureExtractor] = None
    uses_kb: bool = True


@dataclass
class MarkModel:
    arch: ArchConfig
    kb: KnowledgeBase
    shared_fe: Optional[FeatureExtractor] = None
    tasks: Dict[int, TaskModules] = field(default_factory=dict)

    def task(self, t) -> TaskModules:
        try:
            return self.tasks[t]
        except KeyError:
            raise MissingTaskError(f"no trained modules for task {t}") from None

    def feature_extractor(self, t) -> FeatureExtractor:
        mods = self.tasks.get(t)
        if mods is not None and mods.fe is not None:
            return mods.fe
        if self.shared_fe is None:
            raise MissingTaskError(f"no feature extractor for task {t}")
        return self.shared_fe

    def features(self, t, x, ids=None) -> Tensor:
        with no_grad():
            return self.feature_extractor(t)(x, ids=ids, training=False)

    def logits(self, t, x, ids=None, features=None, mask_hook=None) -> Tensor:
        mods = self.task(t)
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if not mods.uses_kb:
            if features is None:
                features = self.feature_extractor(t)(x, ids=ids, training=False)
            return mods.head(features)
        masks = None
        if mods.mask is not None:
            if features is None:
                features = self.features(t, x, ids)
            masks = mods.mask(features)
            if mask_hook is not None:
                masks = mask_hook(masks)
        return mods.head(self.kb(x, masks))

    def predict(self, t, x, ids=None, features=None):
        with no_grad():
            return np.argmax(self.logits(t, x, ids=ids, features=features).data, axis=1)

    def named_tensors(self, include_buffers=True):
        """Flat name -> float32 array view of the whole state, in a stable order."""
        out = {}
        for k, v in self.kb.params.items():
            out[f"kb.{k}"] = v.data
        if self.shared_fe is not None:
            _export_fe(out, "fe", self.shared_fe, include_buffers)
        for t in sorted(self.tasks):
            mods = self.tasks[t]
            if mods.fe is not None:
                _export_fe(out, f"task{t}.fe", mods.fe, include_buffers)
            if mods.mask is not None:
                for k, v in mods.mask.params.items():
                    out[f"task{t}.mask.{k}"] = v.data
            for k, v in mods.head.params.items():
                out[f"task{t}.head.{k}"] = v.data
            if not mods.uses_kb:
                out[f"task{t}.flag.feature_only"] = np.ones(1, np.float32)
        return out

    def clone(self):
        m = MarkModel(self.arch, self.kb.clone(), self.shared_fe.clone() if self.shared_fe else None)
        for t, mods in self.tasks.items():
            m.tasks[t] = TaskModules(mods.head.clone(), mods.mask.clone() if mods.mask else None,
                                     mods.fe.clone() if mods.fe else None, mods.uses_kb)
        return m


def _export_fe(out, prefix, fe, include_buffers):
    for k, v in fe.params.items():
        out[f"{prefix}.{k}"] = v.data
    if include_buffers:
        for i, s in enumerate(fe.bn_states):
            out[f"{prefix}.bn{i}.running_mean"] = s.running_mean
            out[f"{prefix}.bn{i}.running_var"] = s.running_var


def model_from_tensors(arch: ArchConfig, tensors, table=None) -> MarkModel:
    """Rebuild a :class:`MarkModel` from :meth:`MarkModel.named_tensors` output."""
    def grab(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    def as_params(d):
        return {k: Tensor(np.array(v, dtype=np.float32), requires_grad=True) for k, v in d.items()}

    def build_fe(d, variant):
        params = {k: v for k, v in d.items() if "running_" not in k}
        states = []
        i = 0
        while f"bn{i}.running_mean" in d:
            states.append(BatchNormState(np.array(d[f"bn{i}.running_mean"], np.float32),
                                         np.array(d[f"bn{i}.running_var"], np.float32)))
            i += 1
        fe = FeatureExtractor(arch, variant, params=as_params(params), bn_states=states)
        fe.freeze()
        return fe

    kb = KnowledgeBase(arch, params=as_params(grab("kb.")))
    shared = None
    shared_d = grab("fe.")
    if shared_d:
        shared = build_fe(shared_d, "random")
    elif arch.fe_variant == "external_embedding" and table is not None:
        shared = FeatureExtractor(arch, "external_embedding", table=table)
    model = MarkModel(arch, kb, shared)
    task_ids = sorted({int(k.split(".")[0][4:]) for k in tensors if k.startswith("task")})
    for t in task_ids:
        d = grab(f"task{t}.")
        head = ClassifierHead(params=as_params({k[5:]: v for k, v in d.items() if k.startswith("head.")}))
        mask_d = {k[5:]: v for k, v in d.items() if k.startswith("mask.")}
        mask = MaskGenerator(arch.embed_dim, arch.block_channels, params=as_params(mask_d)) if mask_d else None
        fe_d = {k[3:]: v for k, v in d.items() if k.startswith("fe.")}
        fe = build_fe(fe_d, "task_trained") if fe_d else None
        model.tasks[t] = TaskModules(head, mask, fe, uses_kb="flag.feature_only" not in d)
    return model


# -- functional wrappers ------------------------------------------------------

def extract_features(fe: FeatureExtractor, batch, ids=None) -> Tensor:
    """Deterministic embedding of ``batch`` (or of sample indices for the lookup variant)."""
    with no_grad():
        return fe(batch, ids=ids, training=False)


def generate_masks(mg: MaskGenerator, features: Tensor) -> List[Tensor]:
    return mg(features)


def kb_forward(kb: KnowledgeBase, batch: Tensor, masks=None) -> Tensor:
    return kb(batch, masks)


def classify(head: ClassifierHead, trunk_out: Tensor) -> Tensor:
    return head(trunk_out)


def predict(model: MarkModel, batch, task_id, ids=None):
    return model.predict(task_id, batch, ids=ids)


def _numel(params):
    return int(sum(v.size for v in params.values()))


def count_params(model: MarkModel):
    """Exact learnable-parameter counts; the shared KB and shared extractor count once.

    Batch-norm running statistics are buffers, not parameters.
    """
    report = {"kb": _numel(model.kb.params), "shared_fe": 0, "tasks": {}}
    if model.shared_fe is not None:
        report["shared_fe"] = _numel(model.shared_fe.params)
    total = report["kb"] + report["shared_fe"]
    for t in sorted(model.tasks):
        mods = model.tasks[t]
        entry = {
            "fe": _numel(mods.fe.params) if mods.fe is not None else 0,
            "mask": _numel(mods.mask.params) if mods.mask is not None else 0,
            "head": _numel(mods.head.params),
        }
        report["tasks"][t] = entry
        total += sum(entry.values())
    report["total"] = total
    return report


def param_digest(tensors) -> str:
    """sha256 over names and raw bytes; used for freeze/isolation checks."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        v = tensors[name]
        arr = v.data if isinstance(v, Tensor) else v
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- external embedding file -------------------------------------------------

def write_embeddings(path, table):
    table = np.ascontiguousarray(table, dtype="<f4")
    if table.ndim != 2:
        raise DimensionError("embedding table must be 2-D (count, dim)")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", *table.shape))
        fh.write(table.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0, expected {EMBEDDING_MAGIC!r}")
    if len(raw) < 16:
        raise LengthError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", raw, 8)
    need = 16 + 4 * count * dim
    if len(raw) != need:
        raise LengthError(f"{path}: expected {need} bytes for {count}x{dim} embeddings, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(count, dim).astype(np.float32)
