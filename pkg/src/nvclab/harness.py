"""Evaluation jobs: RD curves per mode, BD-rate against baseline, ablation tables.

A job file is JSON::

    {
      "name": "desk",
      "sequences": [{"name": "s1", "seed": 1, "width": 64, "height": 64,
                     "frames": 96, "motion": "mixed"},
                    {"name": "clip", "y4m": "clip.y4m"}],
      "lambdas": [680, 1360, 3040, 6720],
      "modes": ["baseline", "refine_only", "refine_dynamic"],
      "max_iters": 100, "seed": 0,
      "intra_period": 32, "frames_to_code": 96,
      "model": {"path": "codec.nvcm"}  |  {"seed": 0, "steps": 4000, "cache_dir": "..."},
      "out_dir": "results"
    }

``report.json`` holds everything needed to recompute each BD-rate; wall-clock
times go to ``timings.json`` so the report itself stays byte-reproducible.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import os
import time
import traceback
from pathlib import Path

import numpy as np

from .codec import LAMBDAS, CodecModel, default_model, load_model, save_model
from .metrics import RDCurve, bd_rate, fluctuation_csv
from .pipeline import MODES, GopConfig, InvariantError, decode_sequence, encode_sequence
from .quantizer import SgaSchedule
from .refiner import RefineConfig
from .video_io import gen_synthetic, read_y4m, read_yuv420, to_rgb_bt709

__all__ = ["REPORT_SCHEMA_VERSION", "load_job", "load_sequence", "run_eval", "ablate",
           "format_ablation", "thread_cap"]

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

_JOB_DEFAULTS = {
    "name": "eval",
    "lambdas": list(LAMBDAS),
    "modes": list(MODES),
    "max_iters": 100,
    "seed": 0,
    "intra_period": 32,
    "frames_to_code": 96,
    "beta_step": 0.2,
    "beta_direction": 1,
    "out_dir": "results",
}


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("DCVC_DT_THREADS", "1")))
    except ValueError:
        return 1


def load_job(path) -> dict:
    path = Path(path)
    job = json.loads(path.read_text())
    base = path.parent
    for seq in job.get("sequences", []):
        for key in ("y4m", "yuv"):
            if key in seq and not os.path.isabs(seq[key]):
                seq[key] = str(base / seq[key])
    model = job.get("model", {})
    if "path" in model and not os.path.isabs(model["path"]):
        model["path"] = str(base / model["path"])
    if "out_dir" in job and not os.path.isabs(job["out_dir"]):
        job["out_dir"] = str(base / job["out_dir"])
    return job


def load_sequence(spec: dict) -> list:
    frames = spec.get("frames", 96)
    if "y4m" in spec:
        raw = read_y4m(Path(spec["y4m"]).read_bytes())
    elif "yuv" in spec:
        raw = read_yuv420(Path(spec["yuv"]).read_bytes(), spec["width"], spec["height"], frames)
    else:
        return gen_synthetic(spec["seed"], spec.get("width", 64), spec.get("height", 64), frames,
                             spec.get("motion", "mixed"))
    n = min(frames, raw.frame_count)
    return [to_rgb_bt709(raw, i) for i in range(n)]


def _refine_config(job: dict, lam: float, mode: str) -> RefineConfig:
    return RefineConfig(lmbda=float(lam), max_iters=int(job["max_iters"]),
                        dynamic_rd=mode == "refine_dynamic", beta_step=float(job["beta_step"]),
                        beta_direction=int(job["beta_direction"]), seed=int(job["seed"]),
                        sga=SgaSchedule(**job.get("sga", {})))


def _run_unit(job: dict, seq_spec: dict, mode: str, lam: float, model, out_dir: Path) -> dict:
    """Encode + decode one (sequence, mode, lambda); returns an RD point record."""
    if isinstance(model, (str, Path)):
        model = load_model(model)
    started = time.perf_counter()
    frames = load_sequence(seq_spec)
    gop = GopConfig(intra_period=int(job["intra_period"]), frames_to_code=int(job["frames_to_code"]))
    enc = encode_sequence(frames, model, _refine_config(job, lam, mode), gop, mode)
    blob = enc.bitstream.to_bytes()
    dec = decode_sequence(blob, model)
    for t, (a, b) in enumerate(zip(enc.reconstructions, dec)):
        if not np.array_equal(a, b):
            raise InvariantError(f"decoder reconstruction of frame {t} differs from encoder")
    stem = out_dir / seq_spec["name"] / mode
    stem.mkdir(parents=True, exist_ok=True)
    tag = f"lambda{int(lam)}"
    (stem / f"{tag}.bin").write_bytes(blob)
    fluctuation_csv(enc.stats, stem / f"{tag}.csv")
    return {
        "bpp": enc.bpp,
        "psnr": enc.psnr,
        "bytes": len(blob),
        "stats_csv": f"{seq_spec['name']}/{mode}/{tag}.csv",
        "bitstream": f"{seq_spec['name']}/{mode}/{tag}.bin",
        "seconds": time.perf_counter() - started,
    }


def _unit_or_error(*args) -> dict:
    try:
        return _run_unit(*args)
    except Exception as exc:  # recorded; sibling jobs continue
        log.error("job failed: %s", exc)
        return {"error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc(limit=3)}


def run_eval(job: dict, model: CodecModel | None = None) -> dict:
    """Run every (sequence, mode, lambda) unit of ``job`` and write the report.

    ``model`` overrides the job's model entry (used in-process by tests).
    """
    job = {**_JOB_DEFAULTS, **job}
    for mode in job["modes"]:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
    if "baseline" not in job["modes"]:
        raise ValueError("modes must include baseline (the BD-rate anchor)")
    out_dir = Path(job["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    model_ref = model
    if model_ref is None:
        spec = job.get("model", {})
        if "path" in spec:
            model_ref = load_model(spec["path"])
        else:
            model_ref = default_model(spec.get("seed", 0), spec.get("steps", 4000),
                                      spec.get("cache_dir"))
    workers = thread_cap()
    model_path = None
    if workers > 1:
        model_path = out_dir / "model.nvcm"
        save_model(model_ref, model_path)

    units = [(seq, mode, lam) for seq in job["sequences"] for mode in job["modes"]
             for lam in job["lambdas"]]
    started = time.perf_counter()
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_unit_or_error, job, s, m, lam, str(model_path), out_dir)
                       for s, m, lam in units]
            results = [f.result() for f in futures]
    else:
        results = [_unit_or_error(job, s, m, lam, model_ref, out_dir) for s, m, lam in units]

    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": {k: job[k] for k in sorted(job) if k not in ("out_dir",)},
        "model_checksum": model_ref.checksum().hex(),
        "sequences": {},
        "errors": [],
    }
    timings = {"total_seconds": time.perf_counter() - started, "units": []}
    for (seq, mode, lam), res in zip(units, results):
        entry = report["sequences"].setdefault(seq["name"], {"curves": {}, "bd_rate": {}})
        if "error" in res:
            report["errors"].append({"sequence": seq["name"], "mode": mode, "lambda": lam,
                                     "error": res["error"]})
            continue
        curve = entry["curves"].setdefault(mode, {"lambda": [], "bpp": [], "psnr": [],
                                                  "stats_csv": [], "bitstream": []})
        curve["lambda"].append(lam)
        for key in ("bpp", "psnr", "stats_csv", "bitstream"):
            curve[key].append(res[key])
        timings["units"].append({"sequence": seq["name"], "mode": mode, "lambda": lam,
                                 "seconds": res["seconds"]})

    bd_by_mode = {}
    for name, entry in report["sequences"].items():
        anchor = entry["curves"].get("baseline")
        for mode in job["modes"]:
            if mode == "baseline":
                continue
            test = entry["curves"].get(mode)
            value = None
            if anchor and test and len(anchor["bpp"]) == len(test["bpp"]) == len(job["lambdas"]):
                try:
                    value = bd_rate(curve_from_report(anchor, "baseline"), curve_from_report(test, mode))
                except ValueError as exc:
                    report["errors"].append({"sequence": name, "mode": mode, "error": str(exc)})
            entry["bd_rate"][mode] = value
            if value is not None:
                bd_by_mode.setdefault(mode, []).append(value)
    report["average_bd_rate"] = {m: float(np.mean(v)) for m, v in sorted(bd_by_mode.items())}

    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return report


def curve_from_report(curve: dict, label: str = "") -> RDCurve:
    return RDCurve.from_pairs(curve["bpp"], curve["psnr"], label)


def ablate(sequence: dict, model: CodecModel | None = None, out_dir="ablation", **overrides) -> dict:
    """Models A/B/C (baseline, refine_only, refine_dynamic) on one sequence."""
    job = {**overrides, "name": "ablation", "sequences": [sequence], "modes": list(MODES),
           "out_dir": str(out_dir)}
    report = run_eval(job, model)
    bd = report["sequences"][sequence["name"]]["bd_rate"]
    b, c = bd.get("refine_only"), bd.get("refine_dynamic")
    table = {
        "sequence": sequence["name"],
        "A": 0.0,
        "B": b,
        "C": c,
        "C_minus_B": None if b is None or c is None else c - b,
        "report": report,
    }
    Path(out_dir, "ablation.json").write_text(
        json.dumps({k: v for k, v in table.items() if k != "report"}, indent=2, sort_keys=True) + "\n")
    return table


def format_ablation(table: dict) -> str:
    def fmt(v):
        return "n/a" if v is None else f"{v:+.2f}"

    lines = [
        f"Ablation on {table['sequence']} (BD-rate % vs Model A)",
        f"{'Component':<36}{'A':>8}{'B':>8}{'C':>8}",
        f"{'Online latent refinement':<36}{'-':>8}{'x':>8}{'x':>8}",
        f"{'Frame-level dynamic RD adjustment':<36}{'-':>8}{'-':>8}{'x':>8}",
        f"{'BD-rate (%)':<36}{fmt(table['A']):>8}{fmt(table['B']):>8}{fmt(table['C']):>8}",
        f"C - B: {fmt(table['C_minus_B'])}",
    ]
    return "\n".join(lines)
