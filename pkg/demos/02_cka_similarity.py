"""Linear centered kernel alignment as a representation-similarity score.

Walks through the invariances that make CKA a good fidelity proxy for
quantization (orthogonal transforms and isotropic scaling leave it at 1.0,
genuine damage lowers it) and shows the score degrading smoothly as noise
replaces signal.
"""

import numpy as np

from hquant import linear_cka

rng = np.random.default_rng(7)
x = rng.normal(size=(2000, 12))

print("self similarity:              ", linear_cka(x, x).value)
q, _ = np.linalg.qr(rng.normal(size=(12, 12)))
print("after an orthogonal rotation: ", linear_cka(x, x @ q).value)
print("after scaling by -3.7:        ", linear_cka(x, -3.7 * x).value)
print("after a constant row offset:  ", linear_cka(x, x + 100.0).value)

print("\nsignal fading into noise:")
noise = rng.normal(size=x.shape)
for alpha in (0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
    y = (1 - alpha) * x + alpha * noise
    print(f"  noise fraction {alpha:.1f}: cka = {linear_cka(x, y).value:.4f}")

print("\nindependent data (n >> d) scores near zero:")
print("  ", linear_cka(x, rng.normal(size=x.shape)).value)
