"""Dataset splitting, metrics, baselines, and report generation."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .features import frame_powers, vad_flags


def _round_half_up(x):
    return int(np.floor(x + 0.5))


@dataclass
class SplitAssignment:
    assignment: dict  # utterance_id -> "train" | "val" | "test"
    seed: int

    def ids(self, part):
        return [uid for uid, p in self.assignment.items() if p == part]


def split(ids, seed):
    """Seeded 70/15/15 split: val and test get round(0.15 n), train the rest."""
    ids = list(ids)
    n = len(ids)
    if n < 3:
        raise DataError(f"need at least 3 utterances to split, got {n}")
    n_val = _round_half_up(0.15 * n)
    n_test = _round_half_up(0.15 * n)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x59117]))
    order = [ids[i] for i in rng.permutation(n)]
    assignment = {}
    for i, uid in enumerate(order):
        if i < n_val:
            assignment[uid] = "val"
        elif i < n_val + n_test:
            assignment[uid] = "test"
        else:
            assignment[uid] = "train"
    return SplitAssignment({uid: assignment[uid] for uid in ids}, seed)


def pearson(x, y):
    """Sample Pearson correlation; constant input is an error, never silent 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError("pearson needs two equal-length 1-D arrays")
    if len(x) < 2:
        raise DataError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise DataError("correlation undefined for a constant input")
    return float(np.sum(dx * dy) / (sx * sy))


def mse(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError("mse needs equal-length inputs")
    if x.size == 0:
        raise DataError("mse needs at least 1 point")
    return float(np.mean((x - y) ** 2))


_SEGSNR_MIN = -10.0
_SEGSNR_MAX = 35.0


def segsnr_baseline(degraded, clean, p=None):
    """Intrusive segmental SNR over clean-active frames, per-frame clamped.

    Sanity baseline only; per-frame SNR is clamped to [-10, 35] dB before
    averaging.
    """
    if len(degraded) != len(clean):
        raise DataError("aligned equal-length signals required")
    flags = vad_flags(clean.samples, p) == 1
    if not np.any(flags):
        raise DataError("no active frames in the clean reference")
    p_clean = frame_powers(clean.samples, p)[flags]
    p_err = frame_powers(degraded.samples - clean.samples, p)[flags]
    ratio = 10.0 * np.log10((p_clean + 1e-30) / (p_err + 1e-30))
    return float(np.mean(np.clip(ratio, _SEGSNR_MIN, _SEGSNR_MAX)))


def import_external_scores(path):
    """Two-column (id, score) file from an external tool, e.g. PESQ or SRMR."""
    scores = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected 'id score', got {line!r}")
            uid, raw = parts
            if uid in scores:
                raise DataError(f"{path}:{ln}: duplicate id {uid!r}")
            try:
                scores[uid] = float(raw)
            except ValueError as exc:
                raise DataError(f"{path}:{ln}: bad score {raw!r}") from exc
    if not scores:
        print(f"import_external_scores: {path} is empty")
    return scores


@dataclass
class EvalReport:
    model: str
    rho: float
    mse: float
    n: int
    residuals: dict           # utterance_id -> prediction - label
    n_errored: int = 0
    pairs: dict = field(default_factory=dict)  # utterance_id -> (prediction, label)


def evaluate(predictions, labels, model_name="model", errored=()):
    """Pearson and MSE over utterances present in both maps."""
    matched = sorted(set(predictions) & set(labels))
    if len(matched) < 2:
        raise DataError(f"need >= 2 matched (prediction, label) pairs, "
                        f"got {len(matched)}")
    pred = np.array([predictions[uid] for uid in matched])
    lab = np.array([labels[uid] for uid in matched])
    return EvalReport(
        model=model_name,
        rho=pearson(pred, lab),
        mse=mse(pred, lab),
        n=len(matched),
        residuals={uid: float(p - l) for uid, p, l in zip(matched, pred, lab)},
        n_errored=len(errored),
        pairs={uid: (float(p), float(l)) for uid, p, l in zip(matched, pred, lab)},
    )


def write_report_csv(reports, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "rho", "mse", "n"])
        for r in reports:
            writer.writerow([r.model, f"{r.rho:.6f}", f"{r.mse:.6f}", r.n])


def write_residuals_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["utterance_id", "prediction", "label", "residual"])
        for uid in sorted(report.residuals):
            pred, lab = report.pairs[uid]
            writer.writerow([uid, f"{pred:.6f}", f"{lab:.6f}",
                             f"{report.residuals[uid]:.6f}"])
