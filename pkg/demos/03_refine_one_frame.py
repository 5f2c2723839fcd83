"""Refine the latent of a single P-frame and watch the RD cost.

The first run pretrains the small codec (about a minute) and caches it.
Run: python3 demos/03_refine_one_frame.py
"""
# %%
import os

import numpy as np

from nvclab.codec import decode_frame, default_model, encode_frame, extract_context, zero_context
from nvclab.metrics import psnr
from nvclab.quantizer import hard_round
from nvclab.refiner import RefineConfig, refine_latent
from nvclab.video_io import gen_synthetic

cache = os.environ.get("NVCLAB_CACHE", os.path.expanduser("~/.cache/nvclab"))
model = default_model(cache_dir=cache)
frames = gen_synthetic(11, 64, 64, 2, "mixed")

# %% code frame 0 as intra, then use its reconstruction as context
k = 1  # lambda 1360
z = zero_context(64, 64)
prev = decode_frame(hard_round(encode_frame(frames[0], z, model, k).data), z, model, k)
ctx = extract_context(prev, model)
y0 = encode_frame(frames[1], ctx, model, k, frame_index=1)

# %%
cfg = RefineConfig(lmbda=1360.0, max_iters=100)
res = refine_latent(y0, ctx, frames[1], w_t=1.2, beta_t=1.0, model=model, config=cfg)
# row 0 is the hard-rounded cost; later rows are the soft (SGA) cost being optimised,
# which sits above the hard cost while tau is still large
for row in res.trace[::20]:
    print(f"iter {row.iteration:3d}  R {row.r_bits:7.1f} bits  MSE {row.d_mse:.5f}  loss {row.loss:8.1f}")

# %%
before = decode_frame(hard_round(y0.data), ctx, model, k)
after = decode_frame(res.hard, ctx, model, k)
print(f"hard cost {res.initial_loss:.1f} -> {res.final_loss:.1f} "
      f"({100 * (res.final_loss / res.initial_loss - 1):+.2f}%)")
print(f"PSNR {psnr(frames[1], before):.2f} -> {psnr(frames[1], after):.2f} dB")
print("symbols changed:", int(np.sum(res.hard != hard_round(y0.data))))
