"""Cross-modal inference and group-robustness metrics.

Predictions run the image through the shared projection, score it against
every composition prompt, and take the target class of the highest-scoring
composition (ties break toward the lowest flat index). Robustness is
reported as worst-group accuracy (WG), sample-weighted average accuracy
(Avg) and their gap; correctness counts the target prediction only, the
predicted bias classes are diagnostic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams
from .world import AttributeSchema, ImageSample


class MetricsError(ValueError):
    """Raised for unusable metric inputs (no records, no non-empty group)."""


@dataclass(frozen=True)
class PredictionRecord:
    pred_y: int
    pred_b: tuple[int, ...]
    true_y: int
    true_b: tuple[int, ...]
    g: int
    probs: np.ndarray | None = None

    @property
    def correct(self) -> bool:
        return self.pred_y == self.true_y


@dataclass(frozen=True)
class GroupMetrics:
    counts: tuple[int, ...]
    corrects: tuple[int, ...]
    worst_group: float
    average: float

    @property
    def gap(self) -> float:
        return self.average - self.worst_group

    @property
    def accuracies(self) -> tuple[float, ...]:
        return tuple(c / n if n else float("nan")
                     for c, n in zip(self.corrects, self.counts))

    @property
    def empty_groups(self) -> tuple[int, ...]:
        return tuple(i for i, n in enumerate(self.counts) if n == 0)


POLICY_WORST_GROUP = "worst_group"
POLICY_AVERAGE = "average"


def predict(image: ImageSample, prompt_embs: np.ndarray, logit_scale: float,
            params: EncoderParams, state, keep_probs: bool = False) -> PredictionRecord:
    """Classify one image against the composition prompts (highest probability wins)."""
    from .tuner import forward_probabilities

    proj = np.asarray(image.feature, dtype=np.float64) @ params.projection
    x = proj / np.linalg.norm(proj)
    probs = forward_probabilities(x, prompt_embs, logit_scale)
    flat = int(np.argmax(probs))
    coords = np.unravel_index(flat, state.comp_shape)
    return PredictionRecord(pred_y=int(coords[0]),
                            pred_b=tuple(int(c) for c in coords[1:]),
                            true_y=image.y, true_b=image.b, g=image.g,
                            probs=probs if keep_probs else None)


def predict_set(images, prompt_embs: np.ndarray, logit_scale: float,
                params: EncoderParams, state) -> list[PredictionRecord]:
    return [predict(img, prompt_embs, logit_scale, params, state) for img in images]


def zero_shot_prompt_state(schema: AttributeSchema, template_tokens,
                           params: EncoderParams, mode: str = "mtp", attrs=None):
    """Untrained prompts: the context is the frozen template embedding."""
    from .tuner import init_prompt_state

    return init_prompt_state(template_tokens, schema, params, mode, attrs)


def group_metrics_from_arrays(correct: np.ndarray, groups: np.ndarray,
                              n_groups: int) -> GroupMetrics:
    """Tally per-group accuracy, WG over non-empty groups, sample-weighted Avg."""
    correct = np.asarray(correct, dtype=bool)
    groups = np.asarray(groups, dtype=np.int64)
    if correct.size == 0:
        raise MetricsError("no prediction records")
    if groups.min() < 0 or groups.max() >= n_groups:
        raise MetricsError("group index out of range")
    counts = np.bincount(groups, minlength=n_groups)
    corrects = np.bincount(groups, weights=correct.astype(np.float64),
                           minlength=n_groups).astype(np.int64)
    nonempty = counts > 0
    if not nonempty.any():
        raise MetricsError("all groups empty")
    accs = corrects[nonempty] / counts[nonempty]
    return GroupMetrics(counts=tuple(int(c) for c in counts),
                        corrects=tuple(int(c) for c in corrects),
                        worst_group=float(accs.min()),
                        average=float(corrects.sum() / counts.sum()))


def compute_group_metrics(records, n_groups: int) -> GroupMetrics:
    return group_metrics_from_arrays(
        np.array([r.correct for r in records]),
        np.array([r.g for r in records]), n_groups)


def regroup_metrics(records, schema: AttributeSchema, bias_attr: str) -> GroupMetrics:
    """Metrics over (target, one bias attribute) groups, ignoring other biases."""
    bi = schema.bias_index(bias_attr)
    c_b = schema.biases[bi].n_classes
    groups = np.array([r.true_y * c_b + r.true_b[bi] for r in records])
    return group_metrics_from_arrays(
        np.array([r.correct for r in records]), groups,
        schema.target.n_classes * c_b)


def select_checkpoint(loss_record, policy: str) -> int:
    """Epoch maximizing validation WG or Avg; ties go to the earliest epoch."""
    if len(loss_record.val_metrics) == 0:
        raise MetricsError("empty loss record")
    if policy == POLICY_WORST_GROUP:
        values = [m.worst_group for m in loss_record.val_metrics]
    elif policy == POLICY_AVERAGE:
        values = [m.average for m in loss_record.val_metrics]
    else:
        raise MetricsError(f"unknown selection policy {policy!r}")
    return int(np.argmax(values))


def normalize_curve(values) -> list[float]:
    """Min-max rescale to [0, 1]; a constant curve maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise MetricsError("need at least two points to normalize")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return [0.0] * values.size
    return list((values - lo) / (hi - lo))


def metrics_to_dict(m: GroupMetrics) -> dict:
    return {"wg": m.worst_group, "avg": m.average, "gap": m.gap,
            "counts": list(m.counts), "corrects": list(m.corrects),
            "accuracies": [None if np.isnan(a) else a for a in m.accuracies],
            "empty_groups": list(m.empty_groups)}


def dump_predictions(records, path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps({"pred_y": r.pred_y, "pred_b": list(r.pred_b),
                                "true_y": r.true_y, "true_b": list(r.true_b),
                                "g": r.g}) + "\n")
