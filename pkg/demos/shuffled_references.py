"""
Shuffling a reference bucket
============================

Each frame of a story is conditioned on one reference crop of the
character. Shuffling the bucket pairs frames with other views of the same
identity; the stacked baseline keeps crop n on frame n.
"""

from collections import Counter

from storysync.data import generate_synthetic_group, identity_pool, make_id_bucket
from storysync.injector import shuffle_bucket

group = generate_synthetic_group(identity_pool(0)[3], 4, seed=7)
bucket = make_id_bucket(group, ref_size=32)
print(bucket.identity_id, "bucket of", len(bucket), "crops")

for seed in range(3):
    print("seed", seed, "-> frame order", shuffle_bucket(bucket, seed).frame_indices)

# over many seeds every ordering turns up about equally often
counts = Counter(shuffle_bucket(bucket, s).frame_indices for s in range(2400))
print(len(counts), "orderings, frequency range", min(counts.values()) / 2400, max(counts.values()) / 2400)
