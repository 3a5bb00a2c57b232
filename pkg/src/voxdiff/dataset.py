"""Procedural furniture dataset: parametric chairs, tables, and stools built
from axis-aligned box unions, voxelized through their exact analytic SDFs, and
captioned from their own parameters.

Captions are template-generated so the text is guaranteed consistent with the
geometry: every caption contains the category word, and the phrase "no back"
appears exactly when the shape's back-presence parameter is false (shapes with
a back say "a high back" or "a low back" instead).

The manifest is JSON-lines: a header record followed by one record per shape,
each carrying the TSDF filename (relative to the manifest), category, caption,
and the full parameter set, so any entry can be re-rendered bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from voxdiff.geometry import Box, TsdfGrid, Union, analytic_sdf, load_vsdf, save_vsdf

CATEGORIES = ("chair", "table", "stool")

MANIFEST_FORMAT = "voxdiff-dataset"
MANIFEST_VERSION = 1

# legs must stay at least this wide (half-extent) or coarse grids cannot see them
MIN_LEG_HALFWIDTH = 0.03


@dataclasses.dataclass(frozen=True)
class ShapeParams:
    """Parameters of one procedural furniture shape (world units, unit cube)."""

    category: str
    legs: int
    leg_height: float
    leg_halfwidth: float
    seat_halfextent: float
    seat_thickness: float
    back_presence: bool
    back_height: float = 0.0

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.legs not in (3, 4):
            raise ValueError(f"legs must be 3 or 4, got {self.legs}")
        if self.leg_halfwidth < MIN_LEG_HALFWIDTH:
            raise ValueError(
                f"leg_halfwidth {self.leg_halfwidth} below minimum {MIN_LEG_HALFWIDTH}")
        if self.back_presence and self.back_height <= 0:
            raise ValueError("back_presence requires a positive back_height")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeParams":
        return cls(**d)

    @property
    def total_height(self) -> float:
        return self.leg_height + self.seat_thickness + (
            self.back_height if self.back_presence else 0.0)


def sample_shape_params(category: str, rng: np.random.Generator) -> ShapeParams:
    """Draw one parameter set; ranges keep the three categories separable."""
    if category not in CATEGORIES:
        raise ValueError(f"unknown category {category!r}; choose from {CATEGORIES}")
    leg_halfwidth = float(rng.uniform(MIN_LEG_HALFWIDTH, 0.06))
    if category == "chair":
        back = bool(rng.random() < 0.8)
        return ShapeParams(
            category="chair", legs=4,
            leg_height=float(rng.uniform(0.22, 0.32)),
            leg_halfwidth=leg_halfwidth,
            seat_halfextent=float(rng.uniform(0.14, 0.20)),
            seat_thickness=float(rng.uniform(0.04, 0.06)),
            back_presence=back,
            back_height=float(rng.uniform(0.18, 0.30)) if back else 0.0,
        )
    if category == "table":
        return ShapeParams(
            category="table", legs=4,
            leg_height=float(rng.uniform(0.30, 0.42)),
            leg_halfwidth=leg_halfwidth,
            seat_halfextent=float(rng.uniform(0.26, 0.40)),
            seat_thickness=float(rng.uniform(0.04, 0.07)),
            back_presence=False,
        )
    return ShapeParams(
        category="stool", legs=int(rng.choice([3, 4])),
        leg_height=float(rng.uniform(0.14, 0.22)),
        leg_halfwidth=leg_halfwidth,
        seat_halfextent=float(rng.uniform(0.10, 0.15)),
        seat_thickness=float(rng.uniform(0.04, 0.06)),
        back_presence=False,
    )


def shape_primitive(params: ShapeParams) -> Union:
    """Axis-aligned box union for one shape, vertically centered at z=0."""
    total = params.total_height
    z0 = -total / 2.0  # bottom of the legs
    seat_z = z0 + params.leg_height
    parts = []

    hw = params.leg_halfwidth
    if params.legs == 4:
        r = params.seat_halfextent - hw
        leg_xy = [(-r, -r), (-r, r), (r, -r), (r, r)]
    else:
        # tripod: three legs on a circle, one pointing along +x
        radius = params.seat_halfextent - hw - 0.005
        angles = np.deg2rad([0.0, 120.0, 240.0])
        leg_xy = [(radius * np.cos(a), radius * np.sin(a)) for a in angles]
    for x, y in leg_xy:
        parts.append(Box((hw, hw, params.leg_height / 2.0),
                         (float(x), float(y), z0 + params.leg_height / 2.0)))

    parts.append(Box(
        (params.seat_halfextent, params.seat_halfextent, params.seat_thickness / 2.0),
        (0.0, 0.0, seat_z + params.seat_thickness / 2.0)))

    if params.back_presence:
        back_halfthickness = 0.03
        parts.append(Box(
            (params.seat_halfextent, back_halfthickness, params.back_height / 2.0),
            (0.0, params.seat_halfextent - back_halfthickness,
             seat_z + params.seat_thickness + params.back_height / 2.0)))
    return Union(*parts)


_TALL_CUTOFF = {"chair": 0.27, "table": 0.36, "stool": 0.18}
_LEG_WORDS = {3: "three", 4: "four"}


def caption_for(params: ShapeParams) -> str:
    """Template caption; always names the category, and says "no back" exactly
    when the shape has none."""
    size = "tall" if params.leg_height > _TALL_CUTOFF[params.category] else "short"
    girth = "thin" if params.leg_halfwidth < 0.045 else "thick"
    text = (f"a {size} {params.category} with {_LEG_WORDS[params.legs]} "
            f"{girth} legs")
    if params.back_presence:
        text += " and a high back" if params.back_height > 0.24 else " and a low back"
    else:
        text += " and no back"
    return text


def build_shape(params: ShapeParams, resolution: int) -> TsdfGrid:
    """Voxelize one shape through its exact analytic SDF."""
    return analytic_sdf(shape_primitive(params), resolution)


# -- manifest ----------------------------------------------------------------


SPLITS = ("train", "val", "test")


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    index: int
    file: str
    category: str
    captions: tuple[str, ...]
    split: str
    params: ShapeParams

    def __post_init__(self):
        object.__setattr__(self, "captions", tuple(self.captions))
        if len(self.captions) < 1:
            raise ValueError("every entry needs at least one caption")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def caption(self) -> str:
        return self.captions[0]

    def to_dict(self) -> dict:
        return {"index": self.index, "file": self.file, "category": self.category,
                "captions": list(self.captions), "split": self.split,
                "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(index=int(d["index"]), file=str(d["file"]),
                   category=str(d["category"]),
                   captions=tuple(str(c) for c in d["captions"]),
                   split=str(d["split"]),
                   params=ShapeParams.from_dict(d["params"]))


@dataclasses.dataclass
class DatasetManifest:
    resolution: int
    seed: int
    entries: list[ManifestEntry]
    root: Path | None = None  # directory the shape files are relative to

    def __len__(self) -> int:
        return len(self.entries)

    def shape_path(self, entry: ManifestEntry) -> Path:
        root = self.root if self.root is not None else Path(".")
        return root / entry.file

    def load_grid(self, entry: ManifestEntry) -> TsdfGrid:
        return load_vsdf(self.shape_path(entry))

    def load_all(self) -> np.ndarray:
        """All TSDF value grids stacked to (N, D, D, D) float32."""
        return np.stack([self.load_grid(e).values for e in self.entries])

    def captions(self) -> list[str]:
        return [e.caption for e in self.entries]

    def categories(self) -> list[str]:
        return [e.category for e in self.entries]

    def subset(self, split: str) -> "DatasetManifest":
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return DatasetManifest(resolution=self.resolution, seed=self.seed,
                               entries=[e for e in self.entries if e.split == split],
                               root=self.root)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION,
              "resolution": manifest.resolution, "seed": manifest.seed,
              "count": len(manifest.entries)}
    lines = [json.dumps(header)]
    lines.extend(json.dumps(e.to_dict()) for e in manifest.entries)
    path.write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON-lines manifest; malformed lines and missing shape files are
    reported with their line number / path."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise ValueError(f"{path}:{lineno}: malformed JSON line ({err.msg})")
    if not records:
        raise ValueError(f"{path}: empty manifest file (missing header record)")
    header = records[0]
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}:1: not a dataset manifest (format "
                         f"{header.get('format')!r})")
    entries = []
    for offset, record in enumerate(records[1:], start=2):
        try:
            entries.append(ManifestEntry.from_dict(record))
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"{path}:{offset}: bad manifest entry: {err}")
    declared = header.get("count")
    if declared is not None and declared != len(entries):
        raise ValueError(f"{path}: header declares {declared} entries, found "
                         f"{len(entries)}")
    manifest = DatasetManifest(resolution=int(header["resolution"]),
                               seed=int(header.get("seed", 0)),
                               entries=entries, root=path.parent)
    missing = [str(manifest.shape_path(e)) for e in entries
               if not manifest.shape_path(e).exists()]
    if missing:
        raise FileNotFoundError(
            f"manifest {path} references missing shape files: {missing[:5]}")
    return manifest


def build_procedural_dataset(n_shapes: int, categories, resolution: int,
                             seed: int, out_dir) -> DatasetManifest:
    """Generate shapes, write TSDF files + manifest.jsonl, return the manifest.

    Deterministic given ``seed``: each shape draws from its own child stream,
    and categories rotate so every category is evenly represented.
    """
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    categories = list(categories)
    unknown = sorted(set(categories) - set(CATEGORIES))
    if unknown or not categories:
        raise ValueError(
            f"categories must be a nonempty subset of {CATEGORIES}, got {categories}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as err:
        raise OSError(f"output directory {out_dir} is not writable: {err}")

    children = np.random.SeedSequence(seed).spawn(n_shapes)
    entries = []
    for i in range(n_shapes):
        rng = np.random.default_rng(children[i])
        params = sample_shape_params(categories[i % len(categories)], rng)
        grid = build_shape(params, resolution)
        filename = f"shape_{i:04d}.vsdf"
        save_vsdf(grid, out_dir / filename)
        # fixed 8/1/1 split pattern; coprime with the category rotation, so
        # every category lands in every split
        split = "train" if i % 10 < 8 else ("val" if i % 10 == 8 else "test")
        entries.append(ManifestEntry(index=i, file=filename,
                                     category=params.category,
                                     captions=(caption_for(params),),
                                     split=split, params=params))
    manifest = DatasetManifest(resolution=resolution, seed=seed, entries=entries,
                               root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
