"""Backward-corrected cross-entropy and estimators of the correction matrix."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, SingularMatrixError
from .graph import Graph
from .noise import NoiseMatrix, entrywise_l1_distance

DET_TOLERANCE = 1e-12


class Source(str, enum.Enum):
    CONSERVATIVE = "conservative"
    ANCHOR = "anchor"
    EXACT = "exact"


@dataclass(frozen=True, eq=False)
class CorrectionMatrix:
    entries: np.ndarray
    inverse: np.ndarray
    source: Source
    condition_number: float

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    def diagnostics(self, noise: NoiseMatrix | None = None) -> dict:
        out = {
            "source": self.source.value,
            "C": self.entries.tolist(),
            "C_inv": self.inverse.tolist(),
            "condition_number": self.condition_number,
            "mean_diag": float(np.mean(np.diag(self.entries))),
        }
        if noise is not None:
            out["l1_distance"] = entrywise_l1_distance(self.entries, noise.entries)
        return out


class ProbabilisticModel(Protocol):
    def predict_proba(self, graphs: Sequence[Graph]) -> np.ndarray: ...


def invert_correction(entries, source: Source | str = Source.EXACT,
                      blend: float = 0.0) -> CorrectionMatrix:
    """Invert ``entries`` (optionally blended toward the identity first).

    Raises :class:`SingularMatrixError` when ``|det| < 1e-12``, which is how a
    collapsed estimate (e.g. identical rows) surfaces.
    """
    c = np.array(entries, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"correction matrix must be square, got {c.shape}")
    if not 0.0 <= blend <= 1.0:
        raise ConfigError(f"blend must lie in [0, 1], got {blend}")
    if blend:
        c = (1.0 - blend) * c + blend * np.eye(c.shape[0])
    det = np.linalg.det(c)
    if not np.isfinite(det) or abs(det) < DET_TOLERANCE:
        raise SingularMatrixError(f"correction matrix is singular (det={det:.3e}): {c.tolist()}")
    inv = np.linalg.inv(c)
    c.flags.writeable = False
    inv.flags.writeable = False
    return CorrectionMatrix(c, inv, Source(source), float(np.linalg.cond(c)))


def cross_entropy_vector(probs) -> Tensor:
    """Per-class losses ``-log p_j`` (log clamped at 1e-12)."""
    return -ad.log(probs)


def _as_rows(probs) -> tuple[Tensor, bool]:
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if probs.ndim == 1:
        return ad.reshape(probs, (1, probs.shape[0])), True
    return probs, False


def cross_entropy(probs, labels) -> Tensor:
    """Plain per-graph cross-entropy ``-log p[y]``."""
    rows, single = _as_rows(probs)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    out = ad.pick(cross_entropy_vector(rows), labels)
    return ad.reshape(out, ()) if single else out


def backward_loss(probs, observed, correction: CorrectionMatrix | np.ndarray) -> Tensor:
    """``(C^-1 l(p))[observed]`` per graph; may be negative.

    ``probs`` is either one softmax vector or a [B x m] batch; ``observed``
    a label or a length-B label array. Accepts a :class:`CorrectionMatrix` or
    a precomputed inverse.
    """
    inverse = correction.inverse if isinstance(correction, CorrectionMatrix) else np.asarray(correction)
    rows, single = _as_rows(probs)
    if inverse.shape != (rows.shape[1], rows.shape[1]):
        raise ShapeError(f"correction inverse {inverse.shape} vs {rows.shape[1]} classes")
    labels = np.atleast_1d(np.asarray(observed, dtype=np.int64))
    corrected = cross_entropy_vector(rows) @ Tensor(inverse.T)
    out = ad.pick(corrected, labels)
    return ad.reshape(out, ()) if single else out


# --- estimators ------------------------------------------------------------


def conservative_from_probs(probs: np.ndarray) -> np.ndarray:
    """Row ``i`` is the softmax row with the largest ``p[:, i]`` (lowest index on ties)."""
    probs = np.asarray(probs, dtype=np.float64)
    return probs[np.argmax(probs, axis=0)].copy()


def estimate_conservative(model: ProbabilisticModel, graphs: Sequence[Graph],
                          blend: float = 0.0) -> CorrectionMatrix:
    """Fill each row with the response of the most confident training graph for that class."""
    if not len(graphs):
        raise ConfigError("conservative estimation needs at least one graph")
    return invert_correction(conservative_from_probs(model.predict_proba(graphs)),
                             Source.CONSERVATIVE, blend)


def select_anchors(graphs: Sequence[Graph], num_classes: int,
                   anchor_ids: Sequence[int] | None = None) -> list[int]:
    """Index of the anchor graph per class.

    By default the first graph of each class in index order; ``anchor_ids``
    overrides with explicit positions (one per class, class order).
    """
    if anchor_ids is not None:
        anchor_ids = [int(i) for i in anchor_ids]
        if len(anchor_ids) != num_classes:
            raise ConfigError(f"need exactly {num_classes} anchor ids, got {len(anchor_ids)}")
        for cls, idx in enumerate(anchor_ids):
            if graphs[idx].label != cls:
                raise ConfigError(f"anchor {idx} has label {graphs[idx].label}, expected {cls}")
        return anchor_ids
    chosen: dict[int, int] = {}
    for idx, g in enumerate(graphs):
        chosen.setdefault(g.label, idx)
    missing = [c for c in range(num_classes) if c not in chosen]
    if missing:
        raise ConfigError(f"no anchor available for classes {missing}")
    return [chosen[c] for c in range(num_classes)]


def estimate_anchor(model: ProbabilisticModel, anchor_graphs: Sequence[Graph],
                    num_classes: int | None = None, blend: float = 0.0) -> CorrectionMatrix:
    """Row ``i`` is the softmax output on the trusted anchor of class ``i``.

    ``anchor_graphs`` must hold exactly one graph per class, in any order.
    """
    m = num_classes if num_classes is not None else len(anchor_graphs)
    by_class = {g.label: g for g in anchor_graphs}
    if len(anchor_graphs) != m or sorted(by_class) != list(range(m)):
        raise ConfigError(f"need exactly one anchor per class 0..{m - 1}")
    probs = model.predict_proba([by_class[c] for c in range(m)])
    return invert_correction(probs, Source.ANCHOR, blend)


def estimate_exact(noise: NoiseMatrix, blend: float = 0.0) -> CorrectionMatrix:
    return invert_correction(noise.entries, Source.EXACT, blend)
