"""Episodic test-time adaptation by IM maximization, plus PTBN and TENT baselines.

Each test batch is handled in isolation: the source snapshot is restored, a
fresh Adam optimizer updates extractor blocks ``1..J`` on the summed IM loss of
the frozen projectors, and the snapshot is restored again afterwards. Labels
never enter an optimization path; they are only compared against predictions
once an episode has finished.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import losses
from . import tensor as T
from .data import CORRUPTIONS, CorruptionSpec, Dataset, corrupt_images
from .errors import ContractError, ProtocolError
from .nn import ModelBundle, bn_affine_paths, restore, select_trainable, snapshot
from .optim import Adam

logger = logging.getLogger(__name__)

METHODS = ("source", "ptbn", "tent", "clust3")


@dataclass
class AdaptConfig:
    checkpoints: tuple = (1, 3, 5, 10, 20, 50, 100)
    lr: float = 1e-5
    batch_size: int = 128
    J: int = None  # highest adapted block; None -> highest projector layer
    tent_lr: float = 1e-3
    max_batches: int = 4  # per (corruption, severity); None -> whole test set
    severities: tuple = (5,)
    methods: tuple = METHODS

    def __post_init__(self):
        self.checkpoints = tuple(int(c) for c in self.checkpoints)
        self.severities = tuple(int(s) for s in self.severities)
        self.methods = tuple(self.methods)
        if not self.checkpoints or any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
            raise ContractError("checkpoints must be non-empty and strictly increasing")
        if self.checkpoints[0] < 0:
            raise ContractError("checkpoints must be non-negative")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ContractError(f"unknown methods {sorted(unknown)}")


@dataclass
class AdaptTrace:
    """Per-iteration record of one episode; index ``t`` is the state after ``t`` steps."""

    loss: list = field(default_factory=list)  # summed IM loss
    objective: list = field(default_factory=list)  # the minimized quantity (IM, or entropy for TENT)
    h_cond: dict = field(default_factory=dict)  # layer -> per-iteration mean over heads
    h_marg: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)  # checkpoint -> labels
    accuracy: dict = None
    diverged: bool = False

    def score(self, labels):
        labels = np.asarray(labels)
        self.accuracy = {t: float((p == labels).mean()) for t, p in self.predictions.items()}
        return self.accuracy


def prepare(model: ModelBundle):
    """Freeze the current weights as the source state every episode returns to."""
    model.source_snapshot = snapshot(model)
    return model.source_snapshot


def _require_snapshot(model):
    if model.source_snapshot is None:
        raise ProtocolError("model has no source snapshot; call prepare(model) first")
    return model.source_snapshot


def _as_input(model, x):
    return T.Tensor(np.asarray(x), dtype=model.spec.dtype)


def _record(trace: AdaptTrace, loss, parts):
    trace.loss.append(float(loss.data))
    for layer, (_, hc, hm) in parts.items():
        trace.h_cond.setdefault(layer, []).append(float(hc.data.sum()) / hc.data.size)
        trace.h_marg.setdefault(layer, []).append(float(hm.data.sum()) / hm.data.size)


def predict_source(model: ModelBundle, x):
    """No-adaptation control: running BN statistics, no updates."""
    out = model.forward(_as_input(model, x), "eval")
    lim = losses.im_total(out.z)[0] if out.z else None
    return np.argmax(out.logits.data, axis=1), (float(lim.data) if lim is not None else float("nan"))


def baseline_ptbn(model: ModelBundle, x, return_loss=False):
    """Predict with current-batch BN statistics; nothing is updated or stored."""
    out = model.forward(_as_input(model, x), "batch")
    preds = np.argmax(out.logits.data, axis=1)
    if return_loss:
        lim = losses.im_total(out.z)[0] if out.z else None
        return preds, (float(lim.data) if lim is not None else float("nan"))
    return preds


def _episode(model, x, params, lr, objective, checkpoints, reset, objective_is_im=False):
    snap = _require_snapshot(model)
    restore(model, snap)
    model.set_trainable(params)
    named = model.parameters()
    opt = Adam([named[n] for n in sorted(params)], lr=lr)
    xt = _as_input(model, x)
    last = max(checkpoints) if checkpoints else 0
    keep = set(checkpoints) | {0}
    trace = AdaptTrace()
    try:
        for t in range(last + 1):
            out = model.forward(xt, "train")
            loss, parts = objective(out)
            trace.objective.append(float(loss.data))
            if objective_is_im:
                _record(trace, loss, parts)
            elif out.z:
                lim, lim_parts = losses.im_total(out.z)
                _record(trace, lim, lim_parts)
            if t in keep:
                trace.predictions[t] = np.argmax(out.logits.data, axis=1)
            if t == last:
                break
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            if not all(np.isfinite(np.sum(p.data)) for p in opt.params):
                raise FloatingPointError("non-finite parameter after update")
    except FloatingPointError as exc:
        logger.warning("episode diverged: %s; falling back to the unadapted prediction", exc)
        trace.diverged = True
        restore(model, snap)
        fallback = trace.predictions.get(0)
        if fallback is None:
            fallback = np.argmax(model.forward(xt, "eval", with_projectors=False).logits.data, axis=1)
        trace.predictions = {t: fallback for t in keep}
    finally:
        model.set_trainable(())
        if reset:
            restore(model, snap)
    return trace


def adapt_batch(model: ModelBundle, x, cfg: AdaptConfig = None, labels=None, reset=True) -> AdaptTrace:
    """One episode of IM-driven adaptation on a single unlabeled batch.

    Predictions at checkpoint ``t`` use the weights after ``t`` Adam steps and
    current-batch BN statistics; checkpoint 0 is the PTBN prediction.
    ``labels``, if given, are only used to score the finished trace.
    """
    cfg = cfg or AdaptConfig()
    if not model.projectors:
        raise ProtocolError("adaptation needs projectors")
    params = select_trainable(model, "adapt", cfg.J)

    def objective(out):
        return losses.im_total(out.z)

    trace = _episode(model, x, params, cfg.lr, objective, cfg.checkpoints, reset, objective_is_im=True)
    if labels is not None:
        trace.score(labels)
    return trace


def baseline_tent(model: ModelBundle, x, iterations=10, lr=1e-3, labels=None, reset=True) -> AdaptTrace:
    """Entropy minimization of the class predictions over BN affine parameters only.

    ``iterations`` is either a step count or a sequence of checkpoints.
    """
    checkpoints = (int(iterations),) if np.isscalar(iterations) else tuple(iterations)

    def objective(out):
        return losses.prediction_entropy(out.logits), {}

    trace = _episode(model, x, bn_affine_paths(model), lr, objective, checkpoints, reset)
    if labels is not None:
        trace.score(labels)
    return trace


# ---------------------------------------------------------------------------
# streams and result tables


@dataclass
class StreamBatch:
    corruption: str
    severity: int
    index: int
    images: np.ndarray
    labels: np.ndarray


def build_stream(test: Dataset, corruptions, severities, seed, batch_size=128, max_batches=None):
    """Corrupted copies of the test set cut into fixed batches.

    ``"clean"`` is accepted as a corruption name for the no-shift control.
    """
    limit = len(test) if max_batches is None else min(len(test), max_batches * batch_size)
    images, labels = test.images[:limit], test.labels[:limit]
    stream = []
    for kind in corruptions:
        for sev in severities if kind != "clean" else (0,):
            if kind == "clean":
                data = images
            else:
                data = corrupt_images(images, CorruptionSpec(kind, sev, seed))
            for b, start in enumerate(range(0, limit, batch_size)):
                stream.append(StreamBatch(kind, int(sev), b, data[start:start + batch_size], labels[start:start + batch_size]))
    return stream


@dataclass
class TTTResult:
    rows: list
    traces: dict  # (method, corruption, severity, batch index) -> AdaptTrace
    predictions: dict  # (method, corruption, severity, batch index) -> {checkpoint: labels}


def run_ttt(model: ModelBundle, stream, cfg: AdaptConfig = None, seed=0) -> TTTResult:
    """Adapt every batch of ``stream`` episodically and tabulate accuracies.

    Per (corruption, severity) it reports one row per method and checkpoint,
    plus a ``max`` row taking the best checkpoint for iterative methods.
    """
    cfg = cfg or AdaptConfig()
    if model.source_snapshot is None:
        prepare(model)
    traces, preds = {}, {}
    groups = {}
    for sb in stream:
        key = (sb.corruption, sb.severity)
        groups.setdefault(key, []).append(sb)
        tag = (sb.corruption, sb.severity, sb.index)
        if "source" in cfg.methods:
            p, lim = predict_source(model, sb.images)
            preds[("source",) + tag] = {0: p}
            traces[("source",) + tag] = AdaptTrace(loss=[lim], predictions={0: p})
        if "ptbn" in cfg.methods:
            p, lim = baseline_ptbn(model, sb.images, return_loss=True)
            preds[("ptbn",) + tag] = {0: p}
            traces[("ptbn",) + tag] = AdaptTrace(loss=[lim], predictions={0: p})
        if "tent" in cfg.methods:
            tr = baseline_tent(model, sb.images, cfg.checkpoints, cfg.tent_lr)
            traces[("tent",) + tag], preds[("tent",) + tag] = tr, tr.predictions
        if "clust3" in cfg.methods and model.projectors:
            tr = adapt_batch(model, sb.images, cfg)
            traces[("clust3",) + tag], preds[("clust3",) + tag] = tr, tr.predictions

    rows = []
    for (kind, sev), batches in groups.items():
        labels = np.concatenate([b.labels for b in batches])
        total = len(labels)
        for method in cfg.methods:
            keys = [(method, kind, sev, b.index) for b in batches]
            if keys[0] not in traces:
                continue
            ckpts = [0] if method in ("source", "ptbn") else sorted(traces[keys[0]].predictions)
            per_ckpt = []
            for t in ckpts:
                correct = sum(int((preds[k][t] == b.labels).sum()) for k, b in zip(keys, batches))
                lim_before = float(np.mean([traces[k].loss[0] for k in keys]))
                lim_after = float(np.mean([traces[k].loss[min(t, len(traces[k].loss) - 1)] for k in keys]))
                row = {
                    "corruption": kind, "severity": sev, "checkpoint": t, "method": method, "seed": seed,
                    "accuracy": correct / total, "lim_before": lim_before, "lim_after": lim_after,
                }
                rows.append(row)
                per_ckpt.append(row)
            if method in ("tent", "clust3"):
                reported = [r for r in per_ckpt if r["checkpoint"] in cfg.checkpoints]
                best = max(reported, key=lambda r: r["accuracy"])
                rows.append(dict(best, checkpoint="max"))
    return TTTResult(rows, traces, preds)


def summarize(rows):
    """Mean over corruptions of each method's headline accuracy (``max`` rows for iterative methods)."""
    out = {}
    for method in METHODS:
        headline = "max" if method in ("tent", "clust3") else 0
        sel = [r for r in rows if r["method"] == method and r["checkpoint"] == headline]
        if sel:
            out[method] = {
                "mean_accuracy": float(np.mean([r["accuracy"] for r in sel])),
                "per_corruption": {f"{r['corruption']}@{r['severity']}": r["accuracy"] for r in sel},
            }
    return out

