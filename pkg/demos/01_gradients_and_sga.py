"""Gradients through a conv, a rate term and soft rounding.

Run: python3 demos/01_gradients_and_sga.py
"""
# %%
import numpy as np

from nvclab import autodiff as ad
from nvclab.entropy import rate_bits
from nvclab.quantizer import SgaSchedule, hard_round, noise_stream, sga_quantize

rng = np.random.default_rng(0)

# %% a leaf we differentiate and a kernel we don't
x = ad.Tensor(rng.uniform(-1, 1, (2, 8, 8)), requires_grad=True)
kernel = rng.standard_normal((4, 2, 3, 3)) * 0.3

y = ad.conv2d(x, kernel, stride=2)          # 4 x 4 x 4
print("latent shape", y.shape)

# %% soft rounding: close to round() once tau is small
sched = SgaSchedule()
for it in (0, 500, 2000):
    tau = sched.tau(it)
    soft = sga_quantize(ad.scale(y, 3.0), tau, noise_stream(0, 0, it))
    gap = np.abs(soft.data - hard_round(3.0 * y.data)).mean()
    print(f"iter {it:5d}  tau {tau:.3f}  mean |soft - round| = {gap:.3f}")

# %% bits under a unit Gaussian, then backprop to x
soft = sga_quantize(ad.scale(y, 3.0), 0.5, noise_stream(0, 0, 0))
bits = ad.tsum(rate_bits(soft, np.zeros(y.shape), np.ones(y.shape)))
ad.backward(bits, [x])
print(f"{float(bits.data):.1f} bits; grad norm {np.linalg.norm(x.grad):.3f}")

# %% float64 check mode for a quick finite-difference spot check
with ad.precision("float64"):
    x64 = ad.Tensor(x.data.astype(np.float64), requires_grad=True)
    f = lambda t: ad.tsum(ad.square(ad.leaky_relu(ad.conv2d(t, kernel))))
    ad.backward(f(x64), [x64])
    i = (1, 3, 4)
    h = 1e-6
    up, dn = x64.data.copy(), x64.data.copy()
    up[i] += h
    dn[i] -= h
    fd = (float(f(up).data) - float(f(dn).data)) / (2 * h)
    print(f"d/dx{list(i)}: reverse {x64.grad[i]:.8f}  finite diff {fd:.8f}")
