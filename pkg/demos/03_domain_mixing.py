"""Region-level and sample-level mixing between a source and a target image.

Region mixing pastes a source rectangle (image and labels) into a target image.
Sample-level mixing just draws one image from each domain for the same batch.
"""
import numpy as np

from dualmix.domainmix import make_sample_level_pair, region_mix, sample_mask
from dualmix.synthdata import DatasetConfig, build_splits

bundle = build_splits(DatasetConfig(n_source=8, n_target=4, n_unlabeled=4, n_val=4, seed=1))
source, target = bundle.source_labeled[0], bundle.target_labeled[0]
h, w = target.labels.shape

mask = sample_mask(rng_seed=7, height=h, width=w)
print(f"mask rectangle (top, left, height, width) = {mask.rect} in a {h}x{w} image")
mixed = region_mix(target, source, mask)
inside = ~mixed.from_target
print(f"pixels from source: {inside.sum()} of {h * w}")
print("labels inside the box come from the source:", np.array_equal(mixed.labels[inside], source.labels[inside]))
print("labels outside come from the target:       ", np.array_equal(mixed.labels[~inside], target.labels[~inside]))

for seed in range(3):
    s, t = make_sample_level_pair(seed, bundle.source_labeled, bundle.target_labeled)
    print(f"sample-level pair {seed}: source id {s.sample_id}, target id {t.sample_id}")
