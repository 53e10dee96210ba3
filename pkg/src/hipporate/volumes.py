"""3D volumes on the MNI grid: the Volume3D currency, ROI presets and
cropping, and the left/right mirror used for augmentation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GridMismatch, NonFiniteVoxel
from .scoring import CriterionScores

# 1.5 mm MNI grid the preprocessed gray-matter maps live on
MNI_SHAPE = (121, 145, 121)
MNI_VOXEL_MM = 1.5
MNI_CORNER_MM = (-90.0, -126.0, -72.0)


@dataclass
class Volume3D:
    """Dense (x, y, z) scalar grid with its voxel offset into the MNI grid.

    Volumes are immutable by convention: operations return new instances and
    the data array is marked read-only, so instances can be shared freely.
    """

    data: np.ndarray
    origin_mni: tuple[int, int, int] = (0, 0, 0)
    origin_fallback: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr is self.data:
            arr = arr.copy()  # own the buffer; freezing must not alias the caller
        else:
            arr = np.ascontiguousarray(arr)
        if arr.ndim != 3 or any(s < 1 for s in arr.shape):
            raise GridMismatch(f"volume data must be 3D and non-empty, got {arr.shape}")
        if not np.isfinite(arr).all():
            idx = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
            raise NonFiniteVoxel(f"voxel {idx} is non-finite")
        arr.flags.writeable = False
        self.data = arr
        self.origin_mni = tuple(int(i) for i in self.origin_mni)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def is_full_grid(self) -> bool:
        return self.shape == MNI_SHAPE and self.origin_mni == (0, 0, 0)

    def zscored(self) -> "Volume3D":
        """Optional per-volume intensity standardization (off by default in
        every pipeline; gray-matter maps are consumed as-is)."""
        sd = float(self.data.std())
        if sd == 0.0:
            return self
        return replace(self, data=(self.data - self.data.mean()) / sd)


@dataclass(frozen=True)
class RoiPreset:
    """Half-open crop box in MNI voxel coordinates."""

    name: str
    x_range: tuple[int, int]
    y_range: tuple[int, int]
    z_range: tuple[int, int]

    def __post_init__(self):
        for (lo, hi), limit in zip(self.ranges, MNI_SHAPE):
            if not (0 <= lo < hi <= limit):
                raise ValueError(
                    f"ROI {self.name!r} range [{lo}:{hi}) outside the MNI grid"
                )

    @property
    def ranges(self) -> tuple[tuple[int, int], ...]:
        return (self.x_range, self.y_range, self.z_range)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(hi - lo for lo, hi in self.ranges)

    def mirrored_x(self) -> "RoiPreset":
        """The preset's reflection about the MNI x mid-plane."""
        nx = MNI_SHAPE[0]
        lo, hi = self.x_range
        return RoiPreset(
            name=self.name + "_mirror",
            x_range=(nx - hi, nx - lo),
            y_range=self.y_range,
            z_range=self.z_range,
        )


ROI_PRESETS = {
    # hippocampus and close sulci -- the default working ROI
    "hipp": RoiPreset("hipp", (24, 96), (54, 107), (16, 49)),
    # hippocampus and all surrounding sulci
    "sulc": RoiPreset("sulc", (10, 110), (54, 107), (6, 49)),
    # entire temporal lobe
    "temp": RoiPreset("temp", (10, 110), (15, 107), (6, 79)),
}


def crop_roi(v: Volume3D, preset: RoiPreset) -> Volume3D:
    """Extract the preset's box from a full-grid volume; the output origin
    records the box corner so the crop stays locatable in MNI space."""
    if not v.is_full_grid():
        raise GridMismatch(
            f"crop_roi needs a full {MNI_SHAPE} grid at origin (0,0,0), "
            f"got shape {v.shape} at {v.origin_mni}"
        )
    (x0, x1), (y0, y1), (z0, z1) = preset.ranges
    return Volume3D(
        data=v.data[x0:x1, y0:y1, z0:z1].copy(),
        origin_mni=(x0, y0, z0),
    )


def flip_lr(
    v: Volume3D, labels: CriterionScores | None = None
) -> tuple[Volume3D, CriterionScores | None]:
    """Mirror the volume along x (about its own x extent) and swap the
    left/right criterion labels to match the new anatomy."""
    flipped = Volume3D(
        data=np.ascontiguousarray(v.data[::-1, :, :]),
        origin_mni=v.origin_mni,
        origin_fallback=v.origin_fallback,
    )
    return flipped, (labels.flipped() if labels is not None else None)


def embed_full_grid(v: Volume3D) -> Volume3D:
    """Place an ROI volume back into a zeroed full MNI grid (used when
    exporting saliency maps for overlay)."""
    full = np.zeros(MNI_SHAPE, dtype=np.float32)
    x0, y0, z0 = v.origin_mni
    nx, ny, nz = v.shape
    if x0 < 0 or y0 < 0 or z0 < 0 or x0 + nx > MNI_SHAPE[0] \
            or y0 + ny > MNI_SHAPE[1] or z0 + nz > MNI_SHAPE[2]:
        raise GridMismatch(f"volume at {v.origin_mni} with shape {v.shape} "
                           f"does not fit the MNI grid")
    full[x0:x0 + nx, y0:y0 + ny, z0:z0 + nz] = v.data
    return Volume3D(data=full, origin_mni=(0, 0, 0))
