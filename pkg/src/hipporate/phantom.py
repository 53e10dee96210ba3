"""Synthetic (72,53,33) "hippocampus" phantoms with analytic ground truth.

Each hemisphere gets a smooth ellipsoidal blob on a dim cortical background,
an adjacent dark sulcal groove, an optional secondary gyral bump, and a
lateral-to-medial position shift. The four generator parameters map onto the
four criterion scores by quantization, so rating labels are exact functions
of the geometry:

    roundness     -> C1   (blob eccentricity: flat/wide at 0, tall/round at 1)
    sulcus_depth  -> C2   (groove darkness)
    medial_shift  -> C3   (blob x-position, lateral at 0, medial at 1)
    gyrus_bump    -> C5   (bump present or not)

Generation is fully deterministic in the parameter set, including the seed
for the additive Gaussian noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nifti import save_volume
from .scoring import CriterionScores, HemisphereScores, round_criterion
from .volumes import ROI_PRESETS, Volume3D

PHANTOM_SHAPE = ROI_PRESETS["hipp"].shape  # (72, 53, 33)
PHANTOM_ORIGIN = tuple(r[0] for r in ROI_PRESETS["hipp"].ranges)

# base geometry, in crop voxel coordinates
_MIDLINE_X = 36.0
_CENTER = {"L": (17.0, 26.0, 16.0), "R": (54.0, 26.0, 16.0)}
_SHIFT_SPAN = 8.0          # medial_shift=1 moves the blob this far toward x=36
_BLOB_AMPLITUDE = 0.9
_BACKGROUND_AMPLITUDE = 0.3
_GROOVE_AMPLITUDE = 0.6
_BUMP_AMPLITUDE = 0.55
_AX_FLAT, _AX_ROUND = 7.5, 4.5   # blob x semi-axis at roundness 0 / 1
_AZ_FLAT, _AZ_ROUND = 4.5, 7.5   # blob z semi-axis at roundness 0 / 1
_AY = 9.0


@dataclass(frozen=True)
class PhantomParams:
    """Generator controls; continuous values are per-hemisphere (L, R) in
    [0,1], gyrus_bump is binary per hemisphere."""

    seed: int
    roundness: tuple[float, float] = (0.0, 0.0)
    sulcus_depth: tuple[float, float] = (0.0, 0.0)
    medial_shift: tuple[float, float] = (0.0, 0.0)
    gyrus_bump: tuple[int, int] = (0, 0)
    noise_sd: float = 0.0

    def __post_init__(self):
        for name in ("roundness", "sulcus_depth", "medial_shift"):
            pair = getattr(self, name)
            if len(pair) != 2 or any(not 0.0 <= v <= 1.0 for v in pair):
                raise ValueError(f"{name} must be a pair in [0,1], got {pair!r}")
        if len(self.gyrus_bump) != 2 or any(g not in (0, 1) for g in self.gyrus_bump):
            raise ValueError(f"gyrus_bump must be a binary pair, got {self.gyrus_bump!r}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")

    def scores(self) -> CriterionScores:
        """Ground truth: continuous parameters quantized onto the criterion
        grids (the same rounding used for model outputs), C5 verbatim."""
        def hemi(i: int) -> HemisphereScores:
            return HemisphereScores(
                c1=round_criterion(2.0 * self.roundness[i], "C1"),
                c2=round_criterion(2.0 * self.sulcus_depth[i], "C2"),
                c3=round_criterion(2.0 * self.medial_shift[i], "C3"),
                c5=float(self.gyrus_bump[i]),
            )
        return CriterionScores(left=hemi(0), right=hemi(1))


def _coords():
    nx, ny, nz = PHANTOM_SHAPE
    x = np.arange(nx, dtype=np.float64)[:, None, None]
    y = np.arange(ny, dtype=np.float64)[None, :, None]
    z = np.arange(nz, dtype=np.float64)[None, None, :]
    return x, y, z


def _gaussian_blob(center, semi_axes, x, y, z):
    cx, cy, cz = center
    ax, ay, az = semi_axes
    q = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2
    return np.exp(-q)


def _blob_center(hemisphere: str, medial_shift: float) -> tuple[float, float, float]:
    cx, cy, cz = _CENTER[hemisphere]
    toward_midline = 1.0 if hemisphere == "L" else -1.0
    return (cx + toward_midline * _SHIFT_SPAN * medial_shift, cy, cz)


def _blob_axes(roundness: float) -> tuple[float, float, float]:
    ax = _AX_FLAT + (_AX_ROUND - _AX_FLAT) * roundness
    az = _AZ_FLAT + (_AZ_ROUND - _AZ_FLAT) * roundness
    return (ax, _AY, az)


# unscored anatomical variability (uninformative about the criteria):
# per-hemisphere y/z position jitter and overall size scaling
_JITTER_YZ = 3.0
_SIZE_JITTER = 0.10


def _hemisphere_field(hemisphere: str, i: int, p: PhantomParams, x, y, z,
                      jitter=(0.0, 0.0, 1.0)):
    lateral = -1.0 if hemisphere == "L" else 1.0   # away from the midline
    medial = -lateral
    dy, dz, size = jitter
    cx, cy0, cz0 = _blob_center(hemisphere, p.medial_shift[i])
    cy, cz = cy0 + dy, cz0 + dz

    def scaled(axes):
        return tuple(a * size for a in axes)

    field = _BACKGROUND_AMPLITUDE * _gaussian_blob(
        (_CENTER[hemisphere][0], cy, cz), scaled((15.0, 17.0, 12.0)), x, y, z)
    field += _BLOB_AMPLITUDE * _gaussian_blob(
        (cx, cy, cz), scaled(_blob_axes(p.roundness[i])), x, y, z)
    field -= _GROOVE_AMPLITUDE * p.sulcus_depth[i] * _gaussian_blob(
        (cx + lateral * 7.0 * size, cy, cz - 7.0 * size),
        scaled((3.5, 8.0, 4.5)), x, y, z)
    if p.gyrus_bump[i]:
        field += _BUMP_AMPLITUDE * _gaussian_blob(
            (cx + medial * 6.0 * size, cy + 6.0 * size, cz - 8.0 * size),
            scaled((4.0, 5.0, 3.5)), x, y, z)
    return field


def gen_phantom(p: PhantomParams) -> tuple[Volume3D, CriterionScores]:
    """Render the phantom volume and its exact criterion scores.

    Besides the scored geometry, each phantom carries seeded nuisance
    variability that is uninformative about the scores, mimicking real
    normalized gray-matter maps: per-hemisphere y/z position jitter and
    size scaling (residual anatomical variation) plus a global intensity
    gain (+-15%). Noise is drawn last so noise_sd stays absolute.
    """
    x, y, z = _coords()
    rng = np.random.default_rng(p.seed)
    field = np.zeros(PHANTOM_SHAPE, dtype=np.float64)
    for i, hemisphere in enumerate(("L", "R")):
        jitter = (rng.uniform(-_JITTER_YZ, _JITTER_YZ),
                  rng.uniform(-_JITTER_YZ, _JITTER_YZ),
                  rng.uniform(1.0 - _SIZE_JITTER, 1.0 + _SIZE_JITTER))
        field += _hemisphere_field(hemisphere, i, p, x, y, z, jitter)
    gain = rng.uniform(0.85, 1.15)
    field = (field * gain).astype(np.float32)
    if p.noise_sd > 0:
        field = field + rng.standard_normal(PHANTOM_SHAPE, dtype=np.float32) \
            * np.float32(p.noise_sd)
    return Volume3D(data=field, origin_mni=PHANTOM_ORIGIN), p.scores()


def blob_mask(hemisphere: str) -> np.ndarray:
    """Voxels the hippocampus blob can occupy over the whole parameter range
    (inflated ellipsoid around the shift track, widened by the nuisance
    jitter); the reference region for saliency checks."""
    x, y, z = _coords()
    cx0, cy, cz = _CENTER[hemisphere]
    toward_midline = 1.0 if hemisphere == "L" else -1.0
    cx = cx0 + toward_midline * _SHIFT_SPAN / 2.0
    grow = 1.0 + _SIZE_JITTER
    ax = _AX_FLAT * grow + _SHIFT_SPAN / 2.0 + 2.0
    ay = _AY * grow + _JITTER_YZ + 2.0
    az = _AZ_ROUND * grow + _JITTER_YZ + 2.0
    q = ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2
    return (q <= 1.0)


def random_params(seed: int, index: int, noise_sd: float) -> PhantomParams:
    """Parameter draw for subject `index` of a dataset; uniform criteria with
    a moderate bump prevalence."""
    rng = np.random.default_rng([seed, index])
    return PhantomParams(
        seed=int(rng.integers(0, 2**63 - 1)),
        roundness=tuple(rng.uniform(0.0, 1.0, 2)),
        sulcus_depth=tuple(rng.uniform(0.0, 1.0, 2)),
        medial_shift=tuple(rng.uniform(0.0, 1.0, 2)),
        gyrus_bump=tuple(int(b) for b in rng.random(2) < 0.35),
        noise_sd=noise_sd,
    )


def _fake_demographics(seed: int, index: int) -> dict:
    rng = np.random.default_rng([seed, index, 1])
    handed = rng.choice(["R", "L", ""], p=[0.8, 0.12, 0.08])
    return {
        "age": round(float(rng.uniform(8.0, 70.0)), 1),
        "sex": str(rng.choice(["F", "M"])),
        "site": str(rng.choice(["site1", "site2", "site3"])),
        "rater": str(rng.choice(["synthA", "synthB"])),
        "handedness": str(handed),
        "height": round(float(rng.normal(168.0, 10.0)), 1),
        "weight": round(float(rng.normal(70.0, 12.0)), 1),
    }


def emit_dataset(out_dir: str | Path, n: int, seed: int, noise_sd: float = 0.1,
                 config_hash: str | None = None):
    """Write n phantom volumes (.nii.gz) plus a manifest CSV; byte-identical
    across runs with the same arguments. Returns the manifest rows."""
    from .cohort import MANIFEST_COLUMNS, SubjectRecord, write_manifest

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n):
        params = random_params(seed, i, noise_sd)
        volume, scores = gen_phantom(params)
        name = f"phantom{i:05d}.nii.gz"
        save_volume(volume, out_dir / name)
        demo = _fake_demographics(seed, i)
        records.append(SubjectRecord(
            subject_id=f"phantom{i:05d}",
            cohort="PHANTOM",
            image_path=name,
            scores=scores,
            age=demo["age"],
            sex=demo["sex"],
            site=demo["site"],
            rater=demo["rater"],
            handedness=demo["handedness"] or None,
            height=demo["height"],
            weight=demo["weight"],
        ))
    write_manifest(records, out_dir / "manifest.csv", config_hash=config_hash)
    return records
