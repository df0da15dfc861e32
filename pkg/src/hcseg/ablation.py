"""Modality ablation, dominant-sensitivity enhancement and parameter audits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .metrics import REGIONS, dsc, region_masks
from .model import Model, forward, param_count, predict
from .phantom import MODALITIES
from .tensor import Tensor

# index into MODALITIES of the modality each region depends on most
DOMINANT = {"tc": 1, "et": 1, "wt": 3}
WEIGHT_EPS = 1e-6


def ablate_modality(x, m: int):
    """Copy of ``x`` (B, 4, H, W) with channel ``m`` set to zero."""
    if not 0 <= m < len(MODALITIES):
        raise IndexError(f"modality index {m} out of range")
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = arr.copy()
    out[:, m] = 0
    return Tensor(out) if isinstance(x, Tensor) else out


def _region_scores(pred, labels, region):
    return [dsc(region_masks(p)[region], region_masks(g)[region]) for p, g in zip(pred, labels)]


def dice_drop(model: Model, images, labels, m: int, region: str):
    """``(D_full, D_ablated, D_full - D_ablated)`` averaged over the dataset."""
    if len(images) == 0:
        raise ValueError("dice_drop needs a non-empty dataset")
    full = float(np.mean(_region_scores(predict(model, images), labels, region)))
    abl = float(np.mean(_region_scores(predict(model, ablate_modality(images, m)), labels, region)))
    return full, abl, full - abl


def normalized_weights(drops):
    """Drops divided by their sum, or ``None`` entries when undefined.

    Undefined means some drop is negative or the sum is not above 1e-6.
    """
    drops = [float(d) for d in drops]
    total = sum(drops)
    if any(d < 0 for d in drops) or total <= WEIGHT_EPS:
        return [None] * len(drops)
    return [d / total for d in drops]


def dse(variant_drop: float, baseline_drop: float) -> float:
    """Dominant sensitivity enhancement: variant drop minus baseline drop."""
    return variant_drop - baseline_drop


@dataclass
class AblationRow:
    variant: str
    region: str
    modality: str
    dice_full: float
    dice_ablated: float
    drop: float
    w_hat: float | None = None
    dse: float | None = None


@dataclass
class AblationReport:
    rows: list = field(default_factory=list)

    def get(self, variant, region, modality):
        for r in self.rows:
            if (r.variant, r.region, r.modality) == (variant, region, modality):
                return r
        raise KeyError((variant, region, modality))

    def drops(self, variant, region):
        return [self.get(variant, region, mod).drop for mod in MODALITIES]

    def to_csv(self, path):
        write_report_csv(self.rows, path)


REPORT_HEADER = ["variant", "region", "modality", "dice_full", "dice_ablated", "drop", "w_hat", "dse"]


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def write_report_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r.variant, r.region, r.modality, _fmt(r.dice_full), _fmt(r.dice_ablated),
                        _fmt(r.drop), _fmt(r.w_hat), _fmt(r.dse)])


def ablation_rows(name: str, model: Model, images, labels):
    """Full grid of (region, modality) drops for one model.

    A trailing ``mean`` row per region carries the plain average drop over
    the four modalities.
    """
    if len(images) == 0:
        raise ValueError("ablation needs a non-empty dataset")
    full_pred = predict(model, images)
    full = {r: float(np.mean(_region_scores(full_pred, labels, r))) for r in REGIONS}
    ablated = {}
    for m in range(len(MODALITIES)):
        pred = predict(model, ablate_modality(images, m))
        for r in REGIONS:
            ablated[r, m] = float(np.mean(_region_scores(pred, labels, r)))
    rows = []
    for r in REGIONS:
        drops = [full[r] - ablated[r, m] for m in range(len(MODALITIES))]
        weights = normalized_weights(drops)
        for m, mod in enumerate(MODALITIES):
            rows.append(AblationRow(name, r, mod, full[r], ablated[r, m], drops[m], weights[m]))
        rows.append(AblationRow(name, r, "mean", full[r], float(np.mean([ablated[r, m] for m in range(4)])),
                                float(np.mean(drops))))
    return rows


def build_report(variant: str, model: Model, images, labels,
                 baseline: Model | None = None, baseline_name: str = "baseline") -> AblationReport:
    """Ablation report for ``model``; with a baseline, dominant rows get a DSE."""
    rows = ablation_rows(variant, model, images, labels)
    if baseline is not None:
        base_rows = ablation_rows(baseline_name, baseline, images, labels)
        base = {(r.region, r.modality): r.drop for r in base_rows}
        for r in rows:
            if r.modality != "mean" and MODALITIES[DOMINANT[r.region]] == r.modality:
                r.dse = dse(r.drop, base[r.region, r.modality])
        rows = base_rows + rows
    return AblationReport(rows)


# -- gradient sensitivity -------------------------------------------------------

def modality_sensitivities(model: Model, image, labels, region: str):
    """Per-modality Frobenius norms of d(sum of true-class logits in region)/dX.

    Returns ``(raw, normalized)``; ``normalized`` is all zeros when every raw
    sensitivity is zero. One backward pass serves all four modalities.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    mask = region_masks(labels)[region]
    if not mask.any():
        raise ValueError(f"region {region!r} is empty for this sample")
    x = Tensor(arr.copy(), dtype=model.cfg.dtype, requires_grad=True)
    logits = forward(model, x)
    select = np.zeros(logits.shape, dtype=logits.dtype)
    b, yy, xx = np.nonzero(mask)
    select[b, labels[b, yy, xx], yy, xx] = 1
    score = T.sum(logits * Tensor(select))
    if score.requires_grad:
        g = T.backward(score).get(x)
        g = np.zeros_like(arr) if g is None else g.data
    else:
        g = np.zeros_like(arr)
    raw = np.sqrt((g.astype(np.float64) ** 2).sum(axis=(0, 2, 3)))
    total = raw.sum()
    norm = raw / total if total > 0 else np.zeros_like(raw)
    return raw, norm


def gradient_sensitivity(model: Model, image, labels, m: int, region: str) -> float:
    return float(modality_sensitivities(model, image, labels, region)[0][m])


# -- parameter audit ------------------------------------------------------------------

AUDIT_HEADER = ["name", "hc_params", "total_params", "hc_params_m", "total_params_m", "delta_rate_pct"]


def param_audit(models):
    """Table of HC overhead for ``[(name, model), ...]``.

    Each HC model is compared with a baseline of the same depth, width and
    block count from the list.
    """
    def arch(m):
        c = m.cfg
        return (c.depth, c.base_channels, c.blocks_per_stage, c.in_modalities, c.n_classes)

    baselines = {arch(m): param_count(m)[0] for _, m in models if m.cfg.mode == "baseline"}
    rows = []
    for name, m in models:
        total, hc_n = param_count(m)
        if m.cfg.mode == "baseline":
            rate = None
        else:
            if arch(m) not in baselines:
                raise ValueError(f"no baseline in the audit list matches {name}")
            rate = 100.0 * hc_n / baselines[arch(m)]
        rows.append({"name": name, "hc_params": hc_n, "total_params": total, "delta_rate_pct": rate})
    return rows


def format_rate(rate):
    return "" if rate is None else f"{rate:+.5f}"


def write_audit_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AUDIT_HEADER)
        for r in rows:
            hc_m = "" if r["delta_rate_pct"] is None else f"{r['hc_params'] / 1e6:.6f}"
            w.writerow([r["name"], r["hc_params"], r["total_params"], hc_m,
                        f"{r['total_params'] / 1e6:.6f}", format_rate(r["delta_rate_pct"])])


# -- DSE over a table of dominant-modality drops ------------------------------------

DSE_FIXTURE_HEADER = ["model", "region", "variant", "drop_dom"]


def dse_table(rows):
    """Add a ``dse`` entry to rows of (model, region, variant, drop_dom).

    Baseline rows (``variant == "baseline"``) get ``None``.
    """
    base = {(r["model"], r["region"]): float(r["drop_dom"]) for r in rows if r["variant"] == "baseline"}
    out = []
    for r in rows:
        key = (r["model"], r["region"])
        if key not in base:
            raise ValueError(f"missing baseline drop for {key}")
        d = None if r["variant"] == "baseline" else dse(float(r["drop_dom"]), base[key])
        out.append({**r, "dse": d})
    return out
