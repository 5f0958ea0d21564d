"""Continual-learning metrics and post-hoc diagnostics of trained models.

Accuracy matrices are ``T x T`` float arrays; entry ``(i, j)`` is the test
accuracy on task ``j`` right after training task ``i``, and NaN where
``j > i``. Every function here leaves the model it inspects untouched;
:func:`retrain_gain` works on clones.
"""
from collections import defaultdict

import numpy as np

from .errors import DimensionError, MetricError, ParameterError
from .numcore import Tensor, no_grad

CRITICAL_THRESHOLD_PP = 1.0
DEFAULT_TAU = 1e-3


def check_matrix(matrix):
    """Validate the lower-triangular layout and value range of an accuracy matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"accuracy matrix must be square, got {m.shape}")
    for i, row in enumerate(m):
        present = ~np.isnan(row)
        if present.sum() != i + 1 or not present[:i + 1].all():
            raise MetricError(f"row {i} must have exactly {i + 1} leading entries")
        if np.any((row[present] < 0) | (row[present] > 1)):
            raise MetricError(f"row {i} has accuracies outside [0, 1]")
    return m


def avg_accuracy(matrix) -> float:
    """Mean accuracy over all tasks after the last one has been trained."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0 or np.any(np.isnan(m[-1])):
        raise MetricError("final row of the accuracy matrix is incomplete")
    return float(m[-1].mean())


def bwt(matrix) -> float:
    """Backward transfer: mean change on earlier tasks between learning them and the end."""
    m = np.asarray(matrix, dtype=np.float64)
    T = m.shape[0]
    if T < 2:
        raise MetricError("backward transfer needs at least two tasks")
    final, diag = m[-1, :-1], np.diag(m)[:-1]
    if np.any(np.isnan(final)) or np.any(np.isnan(diag)):
        raise MetricError("accuracy matrix is missing entries needed for backward transfer")
    return float(np.mean(final - diag))


def _block_of(name):
    return name.split(".")[0]


def weight_update_fraction(before, after, tau=DEFAULT_TAU):
    """Per block, the share of weights whose absolute change exceeds ``tau``."""
    if tau <= 0:
        raise ParameterError("tau must be positive")
    if set(before) != set(after):
        raise DimensionError("snapshots hold different parameter names")
    moved, total = defaultdict(int), defaultdict(int)
    for name in sorted(before):
        a, b = np.asarray(before[name]), np.asarray(after[name])
        if a.shape != b.shape:
            raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")
        diff = np.abs(b.astype(np.float64) - a.astype(np.float64))
        block = _block_of(name)
        moved[block] += int(np.count_nonzero(diff > tau))
        total[block] += diff.size
    return {blk: moved[blk] / total[blk] for blk in total}


def update_fractions(snapshots, tau=DEFAULT_TAU):
    """Fractions for each task, from the KB snapshots taken at task boundaries."""
    return [weight_update_fraction(snapshots[t], snapshots[t + 1], tau) for t in range(len(snapshots) - 1)]


def learning_curve(events, phase, split="test"):
    """Per-epoch accuracy averaged over tasks, for one phase of a run."""
    per_epoch = defaultdict(list)
    for ev in events:
        if ev["phase"] == phase and ev["split"] == split:
            per_epoch[ev["epoch"]].append(ev["accuracy"])
    if not per_epoch:
        raise MetricError(f"no {split} events recorded for phase {phase!r}")
    epochs = sorted(per_epoch)
    if epochs != list(range(1, len(epochs) + 1)):
        raise MetricError(f"phase {phase!r} has gaps in its epoch record")
    return [float(np.mean(per_epoch[e])) for e in epochs]


def align_curves(mark_curve, baseline_curve, factor=2):
    """Pair MARK epoch ``n`` with baseline epoch ``factor * n``."""
    if len(baseline_curve) != factor * len(mark_curve):
        raise MetricError(f"baseline curve has {len(baseline_curve)} epochs, expected {factor * len(mark_curve)}")
    return list(mark_curve), list(baseline_curve[factor - 1::factor])


def epochs_to_fraction(curve, fraction=0.95):
    """First (1-based) epoch whose value reaches ``fraction`` of the final value."""
    target = fraction * curve[-1]
    for i, v in enumerate(curve):
        if v >= target:
            return i + 1
    return len(curve)


def retrain_gain(model, scenario, cfg, acc_matrix, seed=0, epochs=None, events=None):
    """Re-query each task against the final KB; return accuracy minus the just-trained accuracy.

    Tasks without a KB path (the feature-only ablation) are reported as NaN.
    """
    from .training import query_phase, task_data, evaluate

    datas = task_data(scenario, model)
    m = np.asarray(acc_matrix, dtype=np.float64)
    gains = []
    for data in datas:
        t = data.task.task_id
        if not model.task(t).uses_kb:
            gains.append(float("nan"))
            continue
        clone = model.clone()
        n = cfg.phase_epochs("retrain") if epochs is None else epochs
        query_phase(clone, data, cfg, seed, events, phase="retrain", epochs=n)
        gains.append(evaluate(clone, data, "test")[0] - float(m[t, t]))
    return gains


def _zero_columns(dims):
    def hook(masks):
        out, offset = [], 0
        for m in masks:
            width = m.shape[1]
            local = [d - offset for d in dims if offset <= d < offset + width]
            if local:
                arr = m.data.copy()
                arr[:, local] = 0
                m = Tensor(arr)
            out.append(m)
            offset += width
        return out
    return hook


def _masked_accuracy(model, data, split, hook):
    t = data.task.task_id
    idx = data.split(split)
    x = data.x[idx]
    f = Tensor(data.features[idx]) if data.features is not None else None
    with no_grad():
        logits = model.logits(t, x, ids=data.ids[idx], features=f, mask_hook=hook).data
    return float(np.mean(np.argmax(logits, 1) == data.y[idx]))


def critical_dimensions(model, data, split="test", threshold=CRITICAL_THRESHOLD_PP):
    """Zero each mask dimension in turn and classify it by the accuracy drop it causes.

    Drops are in percentage points. A dimension is ``critical`` when the drop
    reaches ``threshold``, ``no_impact`` when accuracy is exactly unchanged and
    ``impact`` otherwise (including dimensions whose removal helps).
    """
    t = data.task.task_id
    mods = model.task(t)
    if mods.mask is None:
        raise ParameterError(f"task {t} has no mask generator to probe")
    base = _masked_accuracy(model, data, split, None)
    drops, classes = [], []
    for d in range(sum(mods.mask.block_channels)):
        drop = 100.0 * (base - _masked_accuracy(model, data, split, _zero_columns([d])))
        drops.append(drop)
        classes.append("critical" if drop >= threshold else "no_impact" if drop == 0 else "impact")
    blocks, offset = [], 0
    for b, width in enumerate(mods.mask.block_channels):
        cls = classes[offset:offset + width]
        blocks.append({"block": b, "width": width,
                       **{k: cls.count(k) for k in ("no_impact", "impact", "critical")},
                       "no_impact_pct": 100.0 * cls.count("no_impact") / width})
        offset += width
    return {"task": t, "threshold_pp": threshold, "base_accuracy": base, "drops_pp": drops,
            "classes": classes, "blocks": blocks}


def accuracy_all_zeroed(model, data, split="test"):
    """Accuracy with every mask dimension switched off."""
    width = sum(model.task(data.task.task_id).mask.block_channels)
    return _masked_accuracy(model, data, split, _zero_columns(range(width)))


def shared_critical_modules(reports):
    """How many tasks each mask dimension is critical for, grouped by block."""
    if not reports:
        return {"counts": [], "by_block": [], "histogram": {}}
    width = len(reports[0]["classes"])
    counts = [0] * width
    for rep in reports:
        if len(rep["classes"]) != width:
            raise DimensionError("reports cover different numbers of mask dimensions")
        for d, cls in enumerate(rep["classes"]):
            counts[d] += cls == "critical"
    by_block, offset = [], 0
    for blk in reports[0]["blocks"]:
        by_block.append(counts[offset:offset + blk["width"]])
        offset += blk["width"]
    hist = defaultdict(int)
    for c in counts:
        hist[c] += 1
    return {"counts": counts, "by_block": by_block, "histogram": {str(k): hist[k] for k in sorted(hist)}}
