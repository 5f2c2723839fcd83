"""Acceptance criteria 1-11, one test each; a PASS/FAIL line per criterion is
printed in the terminal summary.

The heavy runs (three 96-frame sequences at four rate points, 100 refinement
iterations per frame) take roughly half an hour on one core.
"""

import json
import math
import time

import numpy as np
import pytest

from nvclab import autodiff as ad
from nvclab import cli
from nvclab.codec import LAMBDAS, decode_frame, encode_frame, save_model, zero_context
from nvclab.entropy import (CdfTable, build_cdf_table, estimate_rate, payload_bits, range_decode,
                            range_encode, rate_bits)
from nvclab.harness import run_eval
from nvclab.metrics import RDCurve, bd_rate, read_fluctuation_csv, STATS_COLUMNS
from nvclab.pipeline import GopConfig, encode_sequence
from nvclab.quantizer import gumbel_pair, hard_round, noise_stream, sga_quantize
from nvclab.rd_control import frame_weight, update_beta
from nvclab.refiner import RefineConfig, lr_at
from nvclab.video_io import gen_synthetic
from oracles import bd_rate_trapezoid, central_difference_terms, max_rel_error

SEQUENCES = [
    {"name": "seq1_pan", "seed": 1, "width": 64, "height": 64, "frames": 96, "motion": "pan"},
    {"name": "seq2_noise", "seed": 2, "width": 64, "height": 64, "frames": 96, "motion": "noise"},
    {"name": "seq3_mixed", "seed": 3, "width": 64, "height": 64, "frames": 96, "motion": "mixed"},
]
WALL_CLOCK_LIMIT = 45 * 60


def _main_job(out_dir):
    return {"name": "acceptance", "sequences": SEQUENCES, "lambdas": list(LAMBDAS),
            "modes": ["baseline", "refine_dynamic"], "max_iters": 100, "seed": 0,
            "intra_period": 32, "frames_to_code": 96, "out_dir": str(out_dir)}


@pytest.fixture(scope="module")
def main_run(pretrained, tmp_path_factory):
    out = tmp_path_factory.mktemp("eval_main")
    start = time.perf_counter()
    report = run_eval(_main_job(out), pretrained)
    return out, report, time.perf_counter() - start


@pytest.fixture(scope="module")
def ablation_run(pretrained, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    model_path = out / "model.nvcm"
    save_model(pretrained, model_path)
    code = cli.main(["ablate", "--model", str(model_path), "--seed", "3", "--motion", "mixed",
                     "--frames", "96", "--iters", "100", "--out-dir", str(out / "run")])
    return code, out / "run"


def test_criterion_01_refine_dynamic_beats_baseline(main_run, verdict):
    _, report, seconds = main_run
    bd = {name: entry["bd_rate"]["refine_dynamic"] for name, entry in report["sequences"].items()}
    ok = (not report["errors"] and len(bd) == 3 and all(v is not None and v < 0 for v in bd.values())
          and seconds <= WALL_CLOCK_LIMIT)
    shown = ", ".join(f"{k} {v:+.2f}%" if v is not None else f"{k} n/a" for k, v in bd.items())
    verdict(1, ok, f"BD-rate {shown}; wall clock {seconds / 60:.1f} min")


def test_criterion_02_ablation_table(ablation_run, verdict, capsys):
    code, run = ablation_run
    table = json.loads((run / "ablation.json").read_text())
    b, c = table["B"], table["C"]
    ok = code == 0 and b is not None and c is not None and b < 0 and c < 0
    delta = "n/a" if table["C_minus_B"] is None else f"{table['C_minus_B']:+.2f}"
    verdict(2, ok, f"B {b:+.2f}%, C {c:+.2f}%, C-B {delta} (logged only)")


def test_criterion_03_late_gop_quality(ablation_run, verdict):
    _, run = ablation_run
    seq = next(p for p in run.iterdir() if p.is_dir())
    lam = int(max(LAMBDAS))
    header = (seq / "refine_only" / f"lambda{lam}.csv").read_text().splitlines()[0].split(",")
    base = read_fluctuation_csv(seq / "baseline" / f"lambda{lam}.csv")
    ref = read_fluctuation_csv(seq / "refine_only" / f"lambda{lam}.csv")
    gaps = []
    for g in range(3):
        idx = range(32 * g + 17, 32 * g + 32)
        gaps.append(np.mean([ref[i]["psnr"] for i in idx]) - np.mean([base[i]["psnr"] for i in idx]))
    ok = tuple(header) == STATS_COLUMNS and len(ref) == 96 and all(gap >= -0.05 for gap in gaps)
    verdict(3, ok, "PSNR gain frames 17-31 per GOP: " + ", ".join(f"{g:+.3f} dB" for g in gaps))


def test_criterion_04_beta_update_exact(verdict):
    cases = [(-0.5, 1.2), (0.0, 1.0), (-0.0, 1.0), (0.3, 0.8), (-1e-300, 1.2), (1e-300, 0.8),
             (-1e6, 1.2), (1e6, 0.8), (-math.ulp(0.0), 1.2), (math.ulp(0.0), 0.8)]
    rng = np.random.default_rng(0)
    cases += [(float(d), 1.2 if d < 0 else 0.8) for d in rng.normal(0, 3, 2000) if d != 0]
    bad = [(d, update_beta(d)) for d, want in cases if abs(update_beta(d) - want) > 1e-12]
    values = sorted({round(update_beta(d), 12) for d, _ in cases})
    verdict(4, not bad and values == [0.8, 1.0, 1.2], f"{len(cases)} cases, outputs {values}")


def test_criterion_05_schedules_exact(verdict):
    bad = []
    for n in (10, 100, 1000):
        cfg = RefineConfig(max_iters=n)
        switch = math.floor(0.8 * n)
        for i in range(n):
            want = 1e-3 if i < switch else 1e-4
            if lr_at(i, cfg) != want:
                bad.append((n, i))
    cycle = [frame_weight(t) for t in range(1, 32)]
    expect = [(0.5, 1.2, 0.5, 0.9)[t % 4] for t in range(1, 32)]
    intra = [frame_weight(t) for t in (0, 32, 64)]
    ok = not bad and cycle == expect and intra == [1.0, 1.0, 1.0]
    verdict(5, ok, f"lr switch at 8/80/800; w cycle {cycle[:4]}...; {len(bad)} mismatches")


def test_criterion_06_sga_annealing(verdict):
    n, tau = 10_000, 1e-4
    freqs = {}
    for k, frac in enumerate((0.1, 0.3, 0.7, 0.9)):
        y = np.float32(3.0 + frac) * np.ones(n, np.float32)
        out = sga_quantize(y, tau, noise_stream(11, k, 0)).data
        freqs[frac] = float(np.mean(np.abs(out - hard_round(y)) < 1e-3))
    y = np.full(n, 3.5, np.float32)
    up = float(np.mean(sga_quantize(y, tau, noise_stream(11, 9, 0)).data > 3.5))
    ok = all(f >= 0.999 for f in freqs.values()) and 0.47 <= up <= 0.53
    verdict(6, ok, f"nearest-rounding freq {freqs}; round-up at .5: {up:.4f}")


def _random_graph(seed):
    """A composite of conv, a nonlinearity, SGA with frozen noise, rate and distortion."""
    rng = np.random.default_rng(seed)
    c_in, c_out, size = rng.integers(1, 3), rng.integers(1, 4), 4 * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3, 5]))
    transposed = bool(rng.integers(2))
    stride = int(rng.choice([1, 2]))
    kernel = rng.standard_normal((c_out, c_in, k, k)) / k
    x0 = rng.uniform(-2, 2, (c_in, size, size))
    out_size = size * stride if transposed else -(-size // stride)
    shape = (int(c_out), out_size, out_size)
    noise = tuple(n.astype(np.float64) for n in gumbel_pair(noise_stream(seed, 0, 0), shape))
    tau = float(rng.uniform(0.3, 1.0))
    mu = rng.uniform(-1, 1, shape)
    sigma = rng.uniform(0.5, 2.0, shape)
    target = rng.uniform(-1, 1, shape)
    act = [ad.leaky_relu, ad.sigmoid, ad.softplus, lambda t: ad.scale(ad.square(t), 0.5)][seed % 4]

    count = int(np.prod(shape))

    def terms(x):
        # per-element rate plus distortion; the loss is their sum
        h = act(ad.conv2d(x, kernel, stride=stride, transposed=transposed))
        q = sga_quantize(ad.scale(h, 2.0), tau, noise)
        return ad.add(rate_bits(q, mu, sigma), ad.scale(ad.square(ad.sub(q, target)), 10.0 / count))

    return terms, x0


def test_criterion_07_gradients_match_finite_differences(verdict):
    worst = 0.0
    failures = []
    with ad.precision("float64"):
        for seed in range(50):
            terms, x0 = _random_graph(seed)
            leaf = ad.Tensor(x0.copy(), requires_grad=True)
            ad.backward(ad.tsum(terms(leaf)), [leaf])
            fd = central_difference_terms(lambda v: terms(v).data, x0.copy(), h=1e-5)
            err = max_rel_error(leaf.grad, fd, floor=1e-6)
            worst = max(worst, err)
            if err >= 1e-4:
                failures.append(seed)
    verdict(7, not failures, f"50 graphs, worst relative error {worst:.2e}, failing seeds {failures}")


def test_criterion_08_entropy_transport(verdict):
    rng = np.random.default_rng(8)
    n = 1_000_000
    tables = CdfTable.from_pmf(rng.dirichlet(np.full(32, 0.3), size=64), index=rng.integers(0, 64, n))
    cum = np.cumsum(np.diff(tables.cdf, axis=1), axis=1)[tables.index]
    syms = (cum > rng.integers(0, 1 << 16, n)[:, None]).argmax(axis=1)
    data = range_encode(syms, tables)
    exact = np.array_equal(range_decode(data, tables, n), syms)
    gaps = []
    for batch in range(10):
        mu = rng.uniform(-4, 4, 4096)
        sigma = np.exp(rng.uniform(np.log(0.05), np.log(10), 4096))
        s = np.round(rng.normal(mu, sigma)).astype(np.int64)
        bits = payload_bits(range_encode(s, build_cdf_table(mu, sigma)))
        est = estimate_rate(s.astype(np.float64), mu, sigma).total_bits
        gaps.append((abs(bits - est), 0.01 * est + 256))
    ok = exact and all(g <= lim for g, lim in gaps)
    verdict(8, ok, f"1e6-symbol round trip {'exact' if exact else 'MISMATCH'}; "
                   f"max |coded-estimate| {max(g for g, _ in gaps):.0f} bits "
                   f"(limit >= {min(lim for _, lim in gaps):.0f})")


def test_criterion_09_bd_rate_oracle(verdict):
    rates, q = [0.1, 0.2, 0.4, 0.8], [28.0, 31.0, 34.0, 36.5]
    same = bd_rate(RDCurve.from_pairs(rates, q), RDCurve.from_pairs(rates, q))
    shifted_rates = [r * 1.10 for r in rates]
    shifted = bd_rate(RDCurve.from_pairs(rates, q), RDCurve.from_pairs(shifted_rates, q))
    oracle = bd_rate_trapezoid(rates, q, shifted_rates, q)
    ok = abs(same) < 1e-9 and abs(shifted - 10.0) <= 1e-3 and abs(shifted - oracle) <= 1e-3
    verdict(9, ok, f"identical {same:.1e}; x1.10 -> {shifted:.6f}% (oracle {oracle:.6f}%)")


def test_criterion_10_non_degradation_and_nesting(main_run, pretrained, verdict):
    out, report, _ = main_run
    worse = []
    for name in report["sequences"]:
        for lam in LAMBDAS:
            for row in read_fluctuation_csv(out / name / "refine_dynamic" / f"lambda{int(lam)}.csv"):
                if row["loss1"] > row["loss0"]:
                    worse.append((name, lam, row["frame"]))
    frames = gen_synthetic(5, 64, 64, 10, "mixed")
    gop = GopConfig(intra_period=8, frames_to_code=10)
    nest = []
    for lam in (680.0, 6720.0):
        def blob(mode, **kw):
            cfg = RefineConfig(lmbda=lam, **kw)
            return encode_sequence(frames, pretrained, cfg, gop, mode).bitstream.to_bytes()

        nest.append(blob("refine_only", max_iters=0) == blob("baseline"))
        nest.append(blob("refine_dynamic", max_iters=20, beta_step=0.0)
                    == blob("refine_only", max_iters=20))
    ok = not worse and all(nest)
    verdict(10, ok, f"{len(worse)} frames with higher hard cost; nesting identical: {nest}")


def test_criterion_11_eval_is_deterministic(main_run, pretrained, tmp_path, verdict):
    out, _, _ = main_run
    again = tmp_path / "repeat"
    run_eval(_main_job(again), pretrained)
    same_report = (out / "report.json").read_bytes() == (again / "report.json").read_bytes()
    streams = sorted(p.relative_to(out) for p in out.rglob("*.bin"))
    diff = [str(p) for p in streams if (out / p).read_bytes() != (again / p).read_bytes()]
    ok = same_report and len(streams) == 24 and not diff
    verdict(11, ok, f"report identical: {same_report}; {len(streams) - len(diff)}/{len(streams)} "
                    "bitstreams identical")
