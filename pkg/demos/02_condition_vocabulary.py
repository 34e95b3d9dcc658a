"""
The condition vocabulary: basic, ordinal and scale pretext targets
==================================================================

A condition tells the detector WHAT to find in a synthesized sequence.
The basic form names a target category; the ordinal form restricts to the
o1-th..o2-th instances by start time; the scale form restricts to one
duration-ratio bucket.  Conditions are encoded as concatenated one-hot
blocks and decoded back without loss.
"""

import numpy as np

from tadlab.featbank import BankConfig, generate_bank
from tadlab.pretext import (Condition, encode_condition, encode_ordinal,
                            encode_scale, filter_targets, parse_condition)
from tadlab.synthesis import SCALE_BUCKETS, SynthesisParams, synthesize_indexed

N_TARGET = 6       # width of the category one-hot block
MAX_INSTANCES = 4  # cap for the ordinal blocks

print("scale buckets (by duration ratio r):", ", ".join(SCALE_BUCKETS))
print("  XS: r < 0.25   S: 0.25 <= r < 0.50   L: 0.50 <= r < 0.75   XL: r >= 0.75")

# The two canonical encodings, written out by hand:
#   scale block for bucket S  -> indicator, then one-hot over (XS, S, L, XL)
#   ordinal block for range 2..4 with cap 4 -> indicator, one-hot o1, one-hot o2
print("\nencode_scale(True, 'S')        =", encode_scale(True, "S").astype(int).tolist())
print("encode_ordinal(True, 2, 4, 4)  =",
      encode_ordinal(True, 2, 4, MAX_INSTANCES).astype(int).tolist())

# A full condition vector is basic + ordinal + scale blocks.
for condition in (Condition(3),
                  Condition(0, ordinal_range=(1, 2)),
                  Condition(5, scale_bucket="XS")):
    vec = encode_condition(condition, N_TARGET, MAX_INSTANCES)
    flat = vec.concat()
    parsed = parse_condition(flat, N_TARGET, MAX_INSTANCES)
    print(f"\n{condition}")
    print(f"  basic   {vec.basic.astype(int).tolist()}")
    print(f"  ordinal {vec.ordinal.astype(int).tolist()}")
    print(f"  scale   {vec.scale.astype(int).tolist()}")
    print(f"  parse(encode(c)) == c: {parsed == condition}")

# Conditions act as filters over a synthesized sample's instance list.
bank = generate_bank(BankConfig(num_categories=N_TARGET, feature_dim=16,
                                clips_per_category=12, seed=2))
params = SynthesisParams(target_len=120, num_background=8,
                         target_count_range=(3, 4), max_instances=MAX_INSTANCES, seed=9)
sample = synthesize_indexed(bank, params, 4)
spans = [(inst.ordinal, inst.start, inst.end) for inst in sample.instances]
print(f"\nsample with target category {sample.target_category}, instances {spans}")
for condition in (Condition(sample.target_category),
                  Condition(sample.target_category, ordinal_range=(2, 3))):
    kept = filter_targets(sample.instances, condition)
    print(f"  {condition.ordinal_range or 'all'} -> keeps ordinals "
          f"{[inst.ordinal for inst in kept]}")
