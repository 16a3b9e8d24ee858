"""Reference log-gamma and digamma values at 50 digits.

Writes lgamma_mpmath.csv next to this script.
"""
import math
import os
import random

import mpmath

mpmath.mp.dps = 50
rng = random.Random(7)

xs = [0.5 + 1e-9, 1.0, 1.5, 2.0, 10.0, 100.0, 1e3, 1e6 - 1.0]
xs += [math.exp(rng.uniform(math.log(0.5), math.log(1e6))) for _ in range(400)]

out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "lgamma_mpmath.csv")
with open(out, "w") as f:
    f.write("x,lgamma,digamma\n")
    for x in xs:
        X = mpmath.mpf(x)
        f.write(f"{x!r},{float(mpmath.loggamma(X))!r},{float(mpmath.digamma(X))!r}\n")
