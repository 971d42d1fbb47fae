#
# Volumes, orientation, NIfTI round-trips, and synthetic phantom pairs.
#
# Run from the repository root:  python3 demos/01_volumes_and_phantoms.py
#
import tempfile
from pathlib import Path

import numpy as np

from voxcycle.phantom import generate_phantom_pair
from voxcycle.volume_io import (
    Volume,
    affine_for_orientation,
    read_volume,
    resize_ct,
    to_ras,
    write_volume,
)


def main():
    # a paired pseudo-CT / pseudo-MRI phantom: same label geometry, two
    # intensity styles, so translation between them has a ground truth
    ct, mri = generate_phantom_pair(shape=(32, 32, 32), n_labels=4, seed=7)
    print("phantom pair:", ct.name, "/", mri.name)
    print("  ct intensity range ", (ct.volume.data.min(), ct.volume.data.max()))
    print("  mri intensity range", (mri.volume.data.min(), mri.volume.data.max()))
    print("  shared labels      ", np.unique(ct.labels.data).tolist())
    print("  label names        ", [name for _, name in ct.labels.label_set])
    assert np.array_equal(ct.labels.data, mri.labels.data)

    # orientation: build a deliberately scrambled volume (posterior,
    # superior, right axis order) and canonicalize it
    scrambled = Volume(
        ct.volume.data.transpose(1, 2, 0).copy(),
        affine=affine_for_orientation("PSR"),
    )
    print("\norientation before:", scrambled.orientation, scrambled.shape)
    canonical = to_ras(scrambled)
    print("orientation after: ", canonical.orientation, canonical.shape)

    # NIfTI round-trip: data, spacing and affine survive the file format
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ct.nii.gz"
        write_volume(ct.volume, path)
        back = read_volume(path)
        print("\nround-trip through", path.name)
        print("  max abs data error:", np.abs(back.data - ct.volume.data).max())
        print("  affine preserved:  ", np.allclose(back.affine, ct.volume.affine))

    # in-plane resize with the matched z rule (here 32x32x32 -> 16x16x16)
    small_v, small_l = resize_ct(ct.volume, ct.labels, target_xy=16)
    print("\nresize 32^3 -> target_xy 16:", small_v.shape)
    print("labels stay integral:", small_l.data.dtype, np.unique(small_l.data).tolist())


if __name__ == "__main__":
    main()
