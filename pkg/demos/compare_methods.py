"""Bid one small market instance with every surrogate embedding and compare the outcomes.

Run with ``python demos/compare_methods.py``.  Takes well under a minute.
"""

from cvxdnn.bench import NetCache, TrainingSpec, describe
from cvxdnn.branch_bound import BBOptions
from cvxdnn.embeddings import BigM, CvxdLP, Hybrid, PCAR, PCTAR, Pwl
from cvxdnn.market import generate_instance, run_method

inst = generate_instance("medium", T=6, seed=2)
cache = NetCache(TrainingSpec(n=10_000, epochs=60, lr=1e-3, batch=250), seed=0)
nets = {"cvxd": cache.get((10, 20, 10), 1)[0], "cvxd2": cache.get((10, 20, 10), 2)[0],
        "uc": cache.get((10, 20, 10), None)[0]}

plans = [(CvxdLP(), nets["cvxd"]), (PCAR(0.01), nets["uc"]), (PCTAR(1000.0), nets["uc"]),
         (BigM(), nets["uc"]), (Hybrid(2), nets["cvxd2"]), (Pwl(8), None)]

print(f"prices: {', '.join(f'{p:.1f}' for p in inst.prices)}")
print(f"{'method':<34}{'profit':>10}{'rmse':>10}{'loose':>10}{'time':>8}  status")
for method, net in plans:
    rep, res, _ = run_method(inst, method, net, BBOptions(time_limit=60, gap=0.01))
    print(f"{describe(method):<34}{rep.profit:>10.3f}{rep.rmse:>10.3f}{rep.looseness:>10.3g}"
          f"{res.wall_time:>8.2f}  {res.status.value}")
