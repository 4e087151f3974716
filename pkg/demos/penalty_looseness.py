"""Show how the penalty weight changes what a relaxed ReLU model believes the purchase cost is.

For each penalty the in-model cost at the chosen bids is printed next to the forward-pass
cost of the same network at the same bids.  Small penalties let the solver
under-estimate the cost; the realised profit reflects it.
"""

import numpy as np

from cvxdnn.bench import NetCache, TrainingSpec
from cvxdnn.embeddings import PCAR
from cvxdnn.market import generate_instance, run_method

inst = generate_instance("low", T=8, seed=0)
net = NetCache(TrainingSpec(n=10_000, epochs=60, lr=1e-3, batch=250), seed=0).get((10, 20, 10), None)[0]

print(f"{'penalty':>8}{'profit':>10}{'model cost':>12}{'net cost':>10}")
for alpha in (0.0, 0.01, 1.0, "2^l", 1000.0):
    rep, res, _ = run_method(inst, PCAR(alpha), net)
    print(f"{alpha!s:>8}{rep.profit:>10.3f}{np.sum(rep.surrogate):>12.3f}{np.sum(rep.forward):>10.3f}")
