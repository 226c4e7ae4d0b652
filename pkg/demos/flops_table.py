"""Extra cost of k mask latents at ResNet-50 scale, for both variants.

    python3 demos/flops_table.py
"""
from detcon.model import estimate_flops, paper_descriptor

print("variant\tk\thead_overhead\tloss\ttotal\tpercent")
for variant in ("s", "b"):
    for k in (1, 4, 8, 16, 32):
        r = estimate_flops(paper_descriptor(variant), k)
        print(f"{variant}\t{k}\t{r['head_overhead']:,}\t{r['loss_flops']:,}\t{r['total_overhead']:,}\t"
              f"{r['percent_of_backbone']:.2f}%")
