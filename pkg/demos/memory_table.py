"""Print the analytic memory table (MB) for every preset and policy at batch 64."""

from ecotta import memledger

rows = memledger.memory_table(batch=64)
print(f"{'arch':10s} {'policy':8s} {'param_MB':>9s} {'act_MB':>9s} {'total_MB':>9s}")
for r in rows:
    print(f"{r['arch']:10s} {r['policy']:8s} {r['param_MB']:9.2f} {r['act_MB']:9.2f} {r['total_MB']:9.2f}")
