#!/usr/bin/env python3
"""Two design studies: how many clusters to use, and how much audio-token
length detection needs.

The cluster-count sweep shows the characteristic rise-then-decline under the
conservative closed-form threshold -- too few clusters means a weak per-step
statistic, too many means retokenization errors start crossing cluster
borders.  The crop study shows detection power growing with retained length.
"""

import time

from clustermark.experiments import (
    MethodSpec,
    default_config,
    run_ablation_h,
    run_robustness,
)
from clustermark.reweight import ReweightConfig
from clustermark.simenv import channel_preset

t0 = time.perf_counter()
cfg = default_config(
    channel=channel_preset("longform_qa"),
    trials=80,
    seq_len=500,
    h_grid=(5, 10, 20, 40, 80),
)
table = run_ablation_h(cfg, threads=2)
print(f"cluster-count sweep ({time.perf_counter() - t0:.0f}s), "
      "TPR@1% under the closed-form threshold:")
for row in sorted(table.rows, key=lambda r: r["h"]):
    bar = "#" * int(40 * row["tpr_hoeffding_at_fpr"]["0.01"])
    print(f"  h={row['h']:>3d}  {row['tpr_hoeffding_at_fpr']['0.01']:.2f} {bar}")

t0 = time.perf_counter()
cfg = default_config(
    channel=channel_preset("longform_qa"),
    trials=80,
    seq_len=500,
    methods=[MethodSpec(ReweightConfig("aligned_is", h=20), ngram_n=3)],
    substitution_rates=(),
    insert_delete_rates=(),
    crop_lengths=(50, 100, 200, 300, 400, 500),
)
table = run_robustness(cfg, threads=2)
print(f"\nretained-length study ({time.perf_counter() - t0:.0f}s), TPR@1%:")
for row in sorted((r for r in table.rows if r["attack"] == "crop"),
                  key=lambda r: r["param"]):
    bar = "#" * int(40 * row["tpr_at_fpr"]["0.01"])
    print(f"  keep {row['param']:>3d}  {row['tpr_at_fpr']['0.01']:.2f} {bar}")
