"""
Two synthetic lesion domains and the weak/strong view pair
==========================================================

Source images are labelled, target images are not; the two differ only in
the DomainSpec knobs (noise, intensity, size, contrast, blur).
"""
import tempfile

import numpy as np

from uda_forge.synthdata import (SOURCE_SPEC, TARGET_SPEC, generate_dataset, read_dataset,
                                 strong_augment, weak_augment, write_dataset)
from uda_forge.numerics import Rng

source = generate_dataset(SOURCE_SPEC, 200, seed=1, domain="source")
target = generate_dataset(TARGET_SPEC, 200, seed=2, domain="target")

# per-domain pixel statistics and lesion counts
for name, data in (("source", source), ("target", target)):
    pixels = np.stack([s.image for s in data])
    counts = np.bincount([len(s.boxes) for s in data], minlength=3)
    print(f"{name:>6}: mean {pixels.mean():.3f}  sd {pixels.std():.3f}  lesions per image {counts}")

# a box is the 2-sigma rectangle of its blob
s = next(x for x in source if len(x.boxes))
print("first source box (cx, cy, w, h):", np.round(s.boxes[0], 2))

# the teacher sees the weak view, the student the strong view of the same image;
# the flip is shared so pseudo-boxes line up
rng = Rng(7)
weak, record = weak_augment(s, rng, flip=True)
strong = strong_augment(s, record, rng)
print("weak flipped:", record.flipped, " boxes equal:", np.array_equal(weak.boxes, strong.boxes))
print("strong view record:", strong.aug)

# on-disk manifest: images.bin + labels.csv + meta.txt
with tempfile.TemporaryDirectory() as d:
    write_dataset(d, source[:10], SOURCE_SPEC)
    back = read_dataset(d)
    print("round trip exact:", all(np.array_equal(a.image, b.image) for a, b in zip(source, back)))
