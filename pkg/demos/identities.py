"""Closed-form checks: the split-input attention expansion and per-block parameter counts."""
from sage_lt.analysis import msa_decomposition_check, parameter_table

worst = max(msa_decomposition_check(8, 4, 3, seed=s) for s in range(50))
print(f"(fWq)(fWk)^T(fWv) vs eight-term expansion, 50 draws: max diff {worst:.2e}")

d, r, L = 768, 8, 12
print(f"\nparameters per block and over {L} blocks (d={d}, r={r}, p=10 prompts)")
for name, row in parameter_table(d, r, H=12, p=10, L=L).items():
    print(f"{name:<12}{row['formula']:<22}{row['per_block']:>9}{row['total']:>11}")
