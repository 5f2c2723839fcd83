"""PSNR, Bjontegaard delta rate, and per-frame CSV output."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "PSNR_CAP",
    "psnr",
    "RDPoint",
    "RDCurve",
    "bd_rate",
    "STATS_COLUMNS",
    "fluctuation_csv",
    "read_fluctuation_csv",
    "read_curve_csv",
    "write_curve_csv",
]

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def psnr(a, b) -> float:
    """PSNR in dB for signals in [0, 1], capped at 100 dB for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP))


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float


@dataclass
class RDCurve:
    points: list = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        pts = sorted(self.points, key=lambda p: p.bpp)
        bpp = [p.bpp for p in pts]
        if len(set(bpp)) != len(bpp):
            raise ValueError("bpp values must be strictly increasing")
        if any(b.psnr_db < a.psnr_db for a, b in zip(pts, pts[1:])):
            warnings.warn(f"RD curve {self.label!r}: PSNR decreases with bpp", RuntimeWarning)
        self.points = pts

    @property
    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def psnrs(self) -> np.ndarray:
        return np.array([p.psnr_db for p in self.points])

    def to_dict(self) -> dict:
        return {"label": self.label, "bpp": self.rates.tolist(), "psnr": self.psnrs.tolist()}

    @classmethod
    def from_pairs(cls, bpp, psnr_db, label: str = "") -> "RDCurve":
        return cls([RDPoint(float(r), float(q)) for r, q in zip(bpp, psnr_db)], label)


def bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average rate difference of ``test`` vs ``anchor`` at equal PSNR, in percent.

    Classic Bjontegaard: cubic least-squares fit of log10(rate) against PSNR,
    integrated over the common PSNR interval.
    """
    for name, c in (("anchor", anchor), ("test", test)):
        if len(c.points) < 4:
            raise ValueError(f"{name} curve needs at least 4 points")
    qa, qt = anchor.psnrs, test.psnrs
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError("no quality overlap between curves")
    pa = np.polyfit(qa, np.log10(anchor.rates), 3)
    pt = np.polyfit(qt, np.log10(test.rates), 3)
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    mean_diff = (area_t - area_a) / (hi - lo)
    return float((10.0 ** mean_diff - 1.0) * 100.0)


# ----------------------------------------------------------------- CSV files

STATS_COLUMNS = ("frame", "type", "bpp", "psnr", "delta_q", "beta", "w", "iters", "loss0", "loss1")


def fluctuation_csv(stats, path) -> None:
    if not stats:
        raise ValueError("no frame statistics to write")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(STATS_COLUMNS)
        for s in sorted(stats, key=lambda s: s.frame):
            wr.writerow([s.frame, s.type, repr(s.bpp), repr(s.psnr), repr(s.delta_q),
                         repr(s.beta), repr(s.w), s.iters, repr(s.loss0), repr(s.loss1)])


def read_fluctuation_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "frame": int(r["frame"]), "type": r["type"], "bpp": float(r["bpp"]),
            "psnr": float(r["psnr"]), "delta_q": float(r["delta_q"]), "beta": float(r["beta"]),
            "w": float(r["w"]), "iters": int(r["iters"]), "loss0": float(r["loss0"]),
            "loss1": float(r["loss1"]),
        })
    return out


def write_curve_csv(curve: RDCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["bpp", "psnr"])
        for p in curve.points:
            wr.writerow([repr(p.bpp), repr(p.psnr_db)])


def read_curve_csv(path, label: str = "") -> RDCurve:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return RDCurve.from_pairs([float(r["bpp"]) for r in rows], [float(r["psnr"]) for r in rows], label)
