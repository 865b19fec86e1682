"""Secret shares, a comparison key and the interval gate, one step at a time.

Run with ``python3 demos/gate_walkthrough.py``.
"""

import numpy as np

from fssrag import dcf, gate
from fssrag.field import FieldParams, vadd, vencode, vsigned, vto_offset
from fssrag.prg import SeededRandomness
from fssrag.shares import reconstruct, share

params = FieldParams()  # p = 2^64 - 59, 32 fractional bits
rng = SeededRandomness(0, "demo")

# Additive shares: each half alone is a uniform field element.
x = vencode(params, np.array([0.25, -0.5, 0.75]))
s0, s1 = share(params, x, rng)
print("share 0:", s0.value)
print("share 1:", s1.value)
print("decoded:", vsigned(params, reconstruct(params, s0, s1)) / params.scale)

# A comparison key pair hides the point a; the two outputs sum to b*1{x < a}.
a, b = 1000, 7
k0, k1 = dcf.dcf_gen(params, a, b, rng)
xs = np.array([0, 999, 1000, 5000], dtype=np.uint64)
print("key bytes per party:", k0.nbytes)
print("dcf(x) for x in", xs.tolist(), "->", vadd(params, dcf.dcf_eval(params, k0, xs), dcf.dcf_eval(params, k1, xs)).tolist())

# The gate tests x in [x_l, x_r) on a shared x: the parties open x + r, then
# each evaluates its key and the shares sum to the indicator.
lo = params.to_offset(int(vencode(params, np.array([0.1]))[0]))
g0, g1 = gate.cmp_gen(params, lo, params.p, rng)
dist = vencode(params, np.array([-0.3, 0.05, 0.1, 0.6]))
d0, d1 = share(params, vto_offset(params, dist), rng)
xhat = vadd(params, gate.cmp_eval_mask(params, g0, d0.value), gate.cmp_eval_mask(params, g1, d1.value))
y = vadd(params, gate.cmp_eval_finish(params, g0, xhat), gate.cmp_eval_finish(params, g1, xhat))
print("distance >= 0.1 for [-0.3, 0.05, 0.1, 0.6]:", y.tolist())
