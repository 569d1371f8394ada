"""Analytic cost of one transformer block as the grid grows, patch size 8.

    python demos/04_scaling.py
"""
from nucleus.harness import bench

rows = bench([128, 256, 512, 1024, 2048], measure=False)
by = {(r["resolution"], r["mode"]): r for r in rows}
print(f"{'res':>5} {'tokens':>7} {"full/nbhd scores":>17} {'all/active ffn':>14} {'baseline/nucleus':>17}")
for res in (128, 256, 512, 1024, 2048):
    ours, base = by[(res, "neighborhood+moe")], by[(res, "full+mlp")]
    score = by[(res, "full+moe")]["attn_score_flops"] / ours["attn_score_flops"]
    ffn = ours["ffn_all_expert_flops"] / ours["ffn_flops"]     # what evaluating every expert would cost
    total = base["total_flops"] / ours["total_flops"]
    print(f"{res:5d} {ours['tokens']:7d} {score:17.1f} {ffn:14.2f} {total:17.2f}")
