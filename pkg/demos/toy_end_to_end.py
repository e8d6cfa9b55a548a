"""Train both models on the toy corpus, generate, and print the utility report.

Three routes share a trunk in the middle of a 10x10 grid, so a generator
that only learned marginals would not reproduce the route mix per hour.
Pass a noise multiplier as the first argument (default 1.3; 0 is non-private).
"""
import sys
import time

from dptraj.accountant import epsilon_for_delta
from dptraj.dpsgd import DpSgdConfig
from dptraj.generate import generate
from dptraj.grid import NeighborhoodSpec, OccupiedCellIndex
from dptraj.metrics import evaluate, format_report
from dptraj.preprocess import transition_set
from dptraj.ti import TrajectoryInitializer
from dptraj.toy import TOY_HOURS, toy_dataset
from dptraj.tpg import TransitionModel

sigma = float(sys.argv[1]) if len(sys.argv) > 1 else 1.3
epochs = 60

t0 = time.perf_counter()
d = toy_dataset(5000, seed=0)
nb = NeighborhoodSpec(5)
idx = OccupiedCellIndex.from_trajectories(d.trajectories, d.grid)
print(f"{len(d)} trajectories, {len(idx)} occupied cells of {d.grid.universe_size}")

ti = TrajectoryInitializer(idx, seed=0)
r1 = ti.train(d.trajectories, DpSgdConfig(1.0, sigma, 200, 0.2, epochs, 0))
tpg = TransitionModel(idx, nb, seed=1)
tset = transition_set(d.trajectories, d.grid, nb)
r2 = tpg.train(tset, DpSgdConfig(3.0, sigma, 200, 0.1, epochs, 1))
print("next-hop accuracy on training transitions:", round(tpg.diagnostics(tset)["accuracy"], 4))
if sigma > 0:
    print("privacy:", epsilon_for_delta(r1.ledger + r2.ledger, 1 / len(d)))

res = generate(ti, tpg, len(d), seed=7)
print(f"generated {len(res.dataset)} trajectories, skipped {res.skipped}")
print(format_report(evaluate(d, res.dataset, ks=(3, 10), hours=TOY_HOURS)))
print(f"done in {time.perf_counter() - t0:.0f}s")
