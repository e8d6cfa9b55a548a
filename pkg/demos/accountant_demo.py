"""Privacy budget for a DP-SGD schedule, and how it moves with sigma and epochs."""
from dptraj.accountant import epsilon_for_delta, training_ledger

n, batch = 121622, 200
delta = 1 / n

for sigma in (0.9, 1.1, 1.3, 1.6):
    row = []
    for epochs in (10, 20, 30):
        e = epsilon_for_delta(training_ledger(n, batch, sigma, epochs), delta)
        row.append(f"{e.epsilon:6.3f} (lambda={e.order:2d})")
    print(f"sigma={sigma}:  " + "  ".join(row))

# two models trained on the same records compose by adding log moments
ti = training_ledger(n, batch, 1.3, 15)
tpg = training_ledger(n, batch, 1.3, 15)
print("TI + TPG, 15 epochs each:", epsilon_for_delta(ti + tpg, delta))
