"""Post-hoc feature calibration and scoring.

A per-channel attention weight is extracted from a class-balanced
in-distribution subset plus an outlier set, rescaled to [0, 2], and
multiplied elementwise into features at inference time. Channels that
help the in-distribution side get amplified, channels that outliers
lean on get attenuated. Scoring (energy or max-softmax) then runs on
the calibrated features. Also hosts two post-hoc baselines: classifier
row renormalization and prior-subtraction logit adjustment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EncoderClassifier, classifier_logits
from .vmf import log_sum_exp

__all__ = [
    "AttentionWeight",
    "channel_importance",
    "attention_weight",
    "scale_weight",
    "calibrate_feature",
    "energy_score",
    "msp_score",
    "tau_norm_classifier",
    "posthoc_la_adjust",
    "save_attention",
    "load_attention",
]


@dataclass(frozen=True)
class AttentionWeight:
    """Raw channel weight and its [0, 2]-rescaled form."""

    raw: np.ndarray
    scaled: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float64)
        scaled = np.asarray(self.scaled, dtype=np.float64)
        if raw.ndim != 1 or raw.shape != scaled.shape:
            raise ValueError("raw and scaled must be matching 1-D vectors")
        if not (np.all(np.isfinite(raw)) and np.all(np.isfinite(scaled))):
            raise ValueError("attention weight must be finite")
        if np.any(scaled < -1e-12) or np.any(scaled > 2 + 1e-12):
            raise ValueError("scaled weight must lie in [0, 2]")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "scaled", scaled)

    @classmethod
    def from_raw(cls, raw) -> "AttentionWeight":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw=raw, scaled=scale_weight(raw))


def channel_importance(z, y, clf: EncoderClassifier) -> np.ndarray:
    """Per-channel contribution of a feature vector to its class logit.

    The classifier is linear, so the sensitivity of logit y to channel k
    is the classifier weight itself and the importance reduces to
    ``W[y, :] * z``. Accepts a single (d,) vector with integer y or an
    (n, d) batch with a label vector, returning matching shape. Summed
    over channels this equals the class logit minus its bias.
    """
    z = np.asarray(z, dtype=np.float64)
    w = clf.clf_w
    if z.ndim == 1:
        y = int(y)
        if not 0 <= y < w.shape[0]:
            raise ValueError(f"label {y} out of range for {w.shape[0]} classes")
        return w[y] * z
    labels = np.asarray(y, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError("batch form needs (n, d) features and (n,) labels")
    if np.any(labels < 0) or np.any(labels >= w.shape[0]):
        raise ValueError("label out of range")
    return w[labels] * z


def attention_weight(cb_features, cb_labels, ood_features, clf: EncoderClassifier,
                     priors) -> np.ndarray:
    """Raw attention weight from a class-balanced ID subset and outliers.

    Each ID sample contributes its channel importance under its true
    label, weighted by the inverse class prior; each outlier contributes
    negatively under the label the classifier predicts for it. The
    result is averaged over the combined sample count. Outliers whose
    predicted class never occurs elsewhere need no special casing, but a
    zero prior for any class that actually receives samples is an error.
    """
    cb = np.asarray(cb_features, dtype=np.float64)
    cb_y = np.asarray(cb_labels, dtype=np.int64)
    pri = np.asarray(priors, dtype=np.float64)
    if cb.ndim != 2 or cb.shape[0] == 0:
        raise ValueError("class-balanced ID subset must be non-empty")
    if cb_y.shape != (cb.shape[0],):
        raise ValueError("cb label shape mismatch")
    if pri.ndim != 1 or pri.size != clf.clf_w.shape[0]:
        raise ValueError("priors must have one entry per class")
    if np.any(cb_y < 0) or np.any(cb_y >= pri.size):
        raise ValueError("cb label out of range")

    if ood_features is None:
        ood = np.empty((0, cb.shape[1]))
    else:
        ood = np.asarray(ood_features, dtype=np.float64)
        if ood.ndim != 2 or (ood.size and ood.shape[1] != cb.shape[1]):
            raise ValueError("outlier feature dimension mismatch")
    if ood.shape[0] > 0:
        ood_y = np.argmax(classifier_logits(clf, ood), axis=1)
    else:
        ood_y = np.empty(0, dtype=np.int64)

    occupied = np.union1d(cb_y, ood_y)
    if np.any(pri[occupied] <= 0.0):
        bad = occupied[pri[occupied] <= 0.0]
        raise ValueError(f"zero prior for occupied class {bad[0]}")

    total = np.zeros(cb.shape[1])
    total += np.sum(channel_importance(cb, cb_y, clf) / pri[cb_y, None], axis=0)
    if ood.shape[0] > 0:
        total -= np.sum(channel_importance(ood, ood_y, clf) / pri[ood_y, None], axis=0)
    return total / (cb.shape[0] + ood.shape[0])


def scale_weight(raw) -> np.ndarray:
    """Min-max rescale a raw weight to [0, 2]; a (near-)constant vector
    maps to all ones so calibration degenerates to the identity."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1 or raw.size < 1:
        raise ValueError("raw weight must be a non-empty vector")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw weight must be finite")
    span = raw.max() - raw.min()
    if span < 1e-12:
        return np.ones_like(raw)
    return 2.0 * (raw - raw.min()) / span


def calibrate_feature(z, scaled) -> np.ndarray:
    """Elementwise reweighting of one feature vector or an (n, d) batch.
    No renormalization afterwards: scoring consumes the product as is."""
    z = np.asarray(z, dtype=np.float64)
    s = np.asarray(scaled, dtype=np.float64)
    if s.ndim != 1 or z.shape[-1] != s.size:
        raise ValueError("weight dimension does not match features")
    return z * s


def energy_score(logits):
    """Log-sum-exp of the logits; larger means more in-distribution.
    Accepts one (K,) vector -> float or an (n, K) batch -> (n,) array."""
    a = np.asarray(logits, dtype=np.float64)
    if a.ndim == 1:
        return log_sum_exp(a)
    if a.ndim != 2:
        raise ValueError("logits must be 1- or 2-D")
    m = a.max(axis=1, keepdims=True)
    return (m[:, 0] + np.log(np.sum(np.exp(a - m), axis=1)))


def msp_score(logits):
    """Maximum softmax probability, same shape convention as energy_score."""
    a = np.asarray(logits, dtype=np.float64)
    one = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] < 2:
        raise ValueError("need at least two classes for a softmax score")
    m = a.max(axis=1, keepdims=True)
    e = np.exp(a - m)
    out = e.max(axis=1) / e.sum(axis=1)
    return float(out[0]) if one else out


def tau_norm_classifier(clf: EncoderClassifier, t: float) -> EncoderClassifier:
    """Copy of the model with classifier row y divided by ||row y||^t.

    t = 0 leaves the classifier unchanged, t = 1 puts every row on the
    unit sphere; biases are kept. Long-tail training inflates head-class
    row norms, so this flattens the implicit head bias post hoc.
    """
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"exponent must be in [0, 1], got {t}")
    norms = np.linalg.norm(clf.clf_w, axis=1)
    if np.any(norms < 1e-300):
        raise ValueError("classifier has a zero weight row")
    out = clf.copy()
    out.clf_w = clf.clf_w / norms[:, None] ** t
    return out


def posthoc_la_adjust(logits, priors) -> np.ndarray:
    """Subtract log priors from logits (one vector or a batch). Boosts
    rare classes at prediction time; applying it twice keeps shifting, so
    it is deliberately not idempotent."""
    a = np.asarray(logits, dtype=np.float64)
    pri = np.asarray(priors, dtype=np.float64)
    if pri.ndim != 1 or a.shape[-1] != pri.size:
        raise ValueError("priors must match the class dimension")
    if np.any(pri <= 0.0):
        raise ValueError("priors must be strictly positive")
    return a - np.log(pri)


def save_attention(path, weight: AttentionWeight) -> None:
    """One CSV line holding the raw values then the scaled values."""
    vals = list(weight.raw) + list(weight.scaled)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(repr(float(v)) for v in vals) + "\n")


def load_attention(path) -> AttentionWeight:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    parts = text.strip().split(",")
    if len(parts) < 2 or len(parts) % 2 != 0:
        raise ValueError(f"attention file must hold 2d values, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ValueError(f"bad value in attention file: {exc}") from None
    d = vals.size // 2
    return AttentionWeight(raw=vals[:d], scaled=vals[d:])
