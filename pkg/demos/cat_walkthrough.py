"""
One adaptive test, then a whole cohort
======================================

Generate an item pool, watch a single examinee move through a 25-item
adaptive test, then simulate a cohort and summarise how well the final
ability estimates recover the true abilities.
"""
import numpy as np

from catdif import CatConfig, generate_cohort, generate_pool, simulate_cohort
from catdif.engine import ExposureTally, PoolArrays, administer
from catdif.pool import PoolConfig, pool_moments

pool = generate_pool(PoolConfig(n_items=200), seed=1)
for name, m in pool_moments(pool).items():
    print(f"{name}: mean {m['mean']:.2f}  sd {m['sd']:.2f}  range [{m['min']:.2f}, {m['max']:.2f}]")

# %% a single examinee with true ability 0.8
P = PoolArrays(pool)
cfg = CatConfig(test_length=25, max_exposure=0.33)
rng = np.random.default_rng(7)
log = administer(("demo", 0.8, 0), P, None, cfg, ExposureTally.empty(len(pool)), rng)
print("\nslot  item  theta_prev  response")
for slot, item, theta_prev, x in log.slots:
    print(f"{slot:>4}  {item}  {theta_prev:>10.3f}  {x}")
print(f"final estimate {log.theta_final:.3f} (se {log.se_final:.3f})")

# %% a cohort shares exposure counts, so popular items get rationed
cohort = generate_cohort(1000, seed=3)
for K in (25, 35):
    logs, prec = simulate_cohort(cohort, P, None, CatConfig(test_length=K, max_exposure=0.33), seed=4)
    print(f"K={K}: bias {prec.bias:+.3f}  mse {prec.mse:.3f}  r {prec.correlation:.3f}  csem {prec.csem:.3f}")
