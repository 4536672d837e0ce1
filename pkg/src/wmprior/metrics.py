"""Image/field I/O and the descriptive-statistics panel for reconstructions."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .grid import Field

STAT_LABELS = ("mean", "s", "Min", "Q1", "Median", "Q3", "Max", "ρ", "Residual MAE", "Residual MSE")
_KEYS = ("mean", "std", "min", "q1", "median", "q3", "max", "rho", "mae", "mse")


# --------------------------------------------------------------------------- I/O


def load_image(path, mask: Optional[np.ndarray] = None) -> list[Field]:
    """Read a PNG (8/16-bit, gray or RGB[A]) into one Field per band, scaled to [0, 1]."""
    path = Path(path)
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            scale = 65535.0
            bands = [("gray", arr)]
        else:
            if im.mode in ("1", "LA"):
                im = im.convert("L")
            elif im.mode != "L":
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
            scale = 255.0
            if arr.ndim == 2:
                bands = [("gray", arr)]
            else:
                bands = [(name, arr[..., i]) for i, name in enumerate("RGB")]
    return [Field(a / scale, mask, band=name) for name, a in bands]


def save_image(path, values, bits: int = 8) -> None:
    """Write one band (2-D) or three bands (list or H x W x 3) as PNG, clamped to [0, 1]."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    if isinstance(values, (list, tuple)):
        arr = np.stack([np.asarray(v.values if isinstance(v, Field) else v, dtype=float) for v in values], -1)
    else:
        arr = np.asarray(values.values if isinstance(values, Field) else values, dtype=float)
    arr = np.nan_to_num(np.clip(arr, 0.0, 1.0))
    if bits == 8:
        img = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    else:
        if arr.ndim != 2:
            raise ValueError("16-bit output supports a single band only")
        img = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    img.save(Path(path))


def load_mask(path) -> np.ndarray:
    """Observation mask from a PNG or CSV (nonzero = observed)."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.loadtxt(path, delimiter=",", ndmin=2) != 0
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def load_labels(path) -> np.ndarray:
    """Integer region labels from a grayscale PNG or a CSV."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        lab = np.loadtxt(path, delimiter=",", ndmin=2)
    else:
        with Image.open(path) as im:
            lab = np.asarray(im.convert("L"), dtype=float)
    if not np.all(lab == np.round(lab)):
        raise ValueError("region labels must be integers")
    return lab.astype(int)


def read_field_csv(path) -> Field:
    """Comma-separated matrix; empty or NaN entries are treated as unobserved."""
    with open(path, newline="") as fh:
        rows = [[float(v) if v.strip() not in ("", "nan", "NaN") else np.nan for v in r]
                for r in csv.reader(fh) if r]
    arr = np.array(rows, dtype=float)
    mask = np.isfinite(arr)
    return Field(np.where(mask, arr, 0.0), mask)


def write_field_csv(path, values) -> None:
    arr = np.asarray(values.values if isinstance(values, Field) else values, dtype=float)
    np.savetxt(path, arr, delimiter=",", fmt="%.17g")


def load_field(path) -> list[Field]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return [read_field_csv(path)]
    return load_image(path)


# --------------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class Statistics:
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float
    rho: Optional[float] = None
    mae: Optional[float] = None
    mse: Optional[float] = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in _KEYS}

    def labelled(self) -> dict:
        return dict(zip(STAT_LABELS, (getattr(self, k) for k in _KEYS)))


def report_statistics(estimate, truth=None) -> Statistics:
    """Summary of an estimate, plus correlation and residual errors against ``truth``.

    Quartiles use linear interpolation between order statistics; ``s`` is
    the sample standard deviation (n - 1 denominator). Values are not
    clamped.
    """
    x = np.asarray(estimate.values if isinstance(estimate, Field) else estimate, dtype=float)
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75], method="linear")
    base = dict(mean=float(x.mean()), std=float(x.std(ddof=1)) if x.size > 1 else 0.0,
                min=float(x.min()), q1=float(q1), median=float(med), q3=float(q3), max=float(x.max()))
    if truth is None:
        return Statistics(**base)
    t = np.asarray(truth.values if isinstance(truth, Field) else truth, dtype=float)
    if t.shape != x.shape:
        raise ValueError(f"estimate shape {x.shape} does not match truth shape {t.shape}")
    xc, tc = x - x.mean(), t - t.mean()
    den = np.sqrt((xc * xc).sum() * (tc * tc).sum())
    rho = float((xc * tc).sum() / den) if den > 0 else float("nan")
    if np.array_equal(x, t):
        rho = 1.0
    r = x - t
    return Statistics(**base, rho=rho, mae=float(np.abs(r).mean()), mse=float((r * r).mean()))


def statistics_table(columns: dict) -> list[list[str]]:
    """Rows of a table with the statistic labels down the side and one column per method."""
    names = list(columns)
    rows = [[""] + names]
    for label, key in zip(STAT_LABELS, _KEYS):
        row = [label]
        for name in names:
            v = getattr(columns[name], key)
            row.append("" if v is None else f"{v:.3f}")
        rows.append(row)
    return rows


def write_statistics_csv(path, columns: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(statistics_table(columns))


def write_statistics_json(path, columns: dict) -> None:
    payload = {name: st.labelled() for name, st in columns.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                          encoding="utf-8")


def format_statistics(columns: dict) -> str:
    rows = statistics_table(columns)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


__all__ = ["STAT_LABELS", "Statistics", "load_image", "save_image", "load_mask", "load_labels",
           "read_field_csv", "write_field_csv", "load_field", "report_statistics", "statistics_table",
           "write_statistics_csv", "write_statistics_json", "format_statistics"]
