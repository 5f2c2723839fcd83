"""How close does the coder get to the rate model?

Run: python3 demos/02_range_coder.py
"""
# %%
import numpy as np

from nvclab.entropy import build_cdf_table, estimate_rate, payload_bits, range_decode, range_encode

rng = np.random.default_rng(1)
n = 4096

# %% symbols drawn from the same Gaussians the tables are built from
for spread in (0.1, 1.0, 5.0):
    mu = rng.uniform(-2, 2, n)
    sigma = np.full(n, spread)
    syms = np.round(rng.normal(mu, sigma)).astype(np.int64)
    table = build_cdf_table(mu, sigma)
    data = range_encode(syms, table)
    est = estimate_rate(syms.astype(float), mu, sigma).total_bits
    ok = np.array_equal(range_decode(data, table, n), syms)
    print(f"sigma {spread:4.1f}: model {est:8.0f} bits, coded {payload_bits(data):6d} bits, "
          f"round trip {'ok' if ok else 'BROKEN'}")

# %% big outliers go through the escape path
syms = np.array([0, 1, -1, 500, -7000])
table = build_cdf_table(np.zeros(5), np.ones(5))
print("escapes:", range_decode(range_encode(syms, table), table, 5))
