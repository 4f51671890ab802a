"""Raster sequences on disk, band semantics, labels and the synthetic generator.

A raster sequence holds ``T`` frames of ``H x W`` pixels with ``B`` bands in
(t, row, col, band) order. The default 12-band stack is seven surface
reflectance bands, day and night land surface temperature (Kelvin), then
binary water, agriculture and urban masks.
"""

import csv
import math
import os
import struct
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import FormatError, InputError
from .model import Sample
from .tensor import SeededRng

RASTER_MAGIC = b"YCST"
RASTER_VERSION = 1
FRAMES_PER_MONTH = 4
PIXEL_AREA_HA = 25.0  # one 500 m pixel

CONTINUOUS = "continuous"
MASK = "mask"


@dataclass(frozen=True)
class BandInfo:
    name: str
    kind: str = CONTINUOUS


DEFAULT_BANDS = (
    BandInfo("refl_b1_red"),
    BandInfo("refl_b2_nir"),
    BandInfo("refl_b3_blue"),
    BandInfo("refl_b4_green"),
    BandInfo("refl_b5_nir2"),
    BandInfo("refl_b6_swir1"),
    BandInfo("refl_b7_swir2"),
    BandInfo("lst_day_k"),
    BandInfo("lst_night_k"),
    BandInfo("mask_water", MASK),
    BandInfo("mask_agriculture", MASK),
    BandInfo("mask_urban", MASK),
)
RED, NIR, AGRI = "refl_b1_red", "refl_b2_nir", "mask_agriculture"
_KIND_CODES = {CONTINUOUS: 0, MASK: 1}


@dataclass
class RasterSequence:
    region_id: str
    year: int
    data: np.ndarray  # (T, H, W, B) float32
    bands: tuple = DEFAULT_BANDS

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.bands = tuple(self.bands)
        if self.data.ndim != 4:
            raise InputError(f"raster data must be (T, H, W, B), got shape {self.data.shape}")
        if self.data.shape[3] != len(self.bands):
            raise InputError(f"{self.data.shape[3]} bands in data but {len(self.bands)} descriptors")

    @property
    def shape(self):
        return self.data.shape

    def band_index(self, name):
        for k, band in enumerate(self.bands):
            if band.name == name:
                return k
        raise InputError(f"band {name!r} not present (have {[b.name for b in self.bands]})")

    def band(self, name):
        return self.data[..., self.band_index(name)]


# YCST files ------------------------------------------------------------------

def write_raster(seq, path):
    """Write ``seq`` as a YCST file.

    Layout: magic, version, then T, H, W, B (uint32 LE); a band table with
    one ``(kind u8, name length u16, utf-8 name)`` entry per band; then the
    float32 LE payload.
    """
    T, H, W, B = seq.data.shape
    parts = [RASTER_MAGIC, struct.pack("<5I", RASTER_VERSION, T, H, W, B)]
    for band in seq.bands:
        name = band.name.encode("utf-8")
        parts.append(struct.pack("<BH", _KIND_CODES[band.kind], len(name)) + name)
    parts.append(seq.data.astype("<f4", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_raster(path, region_id="", year=0):
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4:
        raise FormatError("truncated file while reading magic", len(buf))
    if buf[:4] != RASTER_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0)
    if len(buf) < 24:
        raise FormatError("truncated header", len(buf))
    version, T, H, W, B = struct.unpack_from("<5I", buf, 4)
    if version != RASTER_VERSION:
        raise FormatError(f"unsupported raster version {version}", 4)
    pos = 24
    kinds = {v: k for k, v in _KIND_CODES.items()}
    bands = []
    for _ in range(B):
        if pos + 3 > len(buf):
            raise FormatError("truncated band table", pos)
        code, n = struct.unpack_from("<BH", buf, pos)
        if code not in kinds:
            raise FormatError(f"unknown band kind {code}", pos)
        pos += 3
        if pos + n > len(buf):
            raise FormatError("truncated band name", pos)
        bands.append(BandInfo(buf[pos:pos + n].decode("utf-8"), kinds[code]))
        pos += n
    need = T * H * W * B * 4
    if len(buf) - pos < need:
        raise FormatError(f"payload holds {len(buf) - pos} bytes, expected {need}", len(buf))
    if len(buf) - pos > need:
        raise FormatError("trailing bytes after payload", pos + need)
    data = np.frombuffer(buf, dtype="<f4", count=T * H * W * B, offset=pos).reshape(T, H, W, B)
    return RasterSequence(region_id, year, data.astype(np.float32), tuple(bands))


def payload_nbytes(T, H, W, B):
    return T * H * W * B * 4


# band operations -------------------------------------------------------------

def apply_agri_mask(seq):
    """Zero every continuous band outside agriculture pixels and drop the masks."""
    try:
        agri = seq.band(AGRI)
    except InputError as exc:
        raise InputError("agriculture mask band missing; cannot apply the mask") from exc
    keep = [k for k, b in enumerate(seq.bands) if b.kind == CONTINUOUS]
    data = seq.data[..., keep] * agri[..., None]
    return RasterSequence(seq.region_id, seq.year, data, tuple(seq.bands[k] for k in keep))


def pad_to(seq, height, width):
    """Zero-pad frames at the bottom and right up to ``height x width``."""
    T, H, W, B = seq.data.shape
    if H > height or W > width:
        raise InputError(f"frame {H}x{W} exceeds target {height}x{width}")
    data = np.zeros((T, height, width, B), dtype=np.float32)
    data[:, :H, :W] = seq.data
    return replace(seq, data=data)


def month_frames(month):
    """Zero-based frame indices of a 1-based month (four frames each)."""
    if month < 1:
        raise InputError(f"month must be >= 1, got {month}")
    start = FRAMES_PER_MONTH * (month - 1)
    return list(range(start, start + FRAMES_PER_MONTH))


# labels ----------------------------------------------------------------------

@dataclass(frozen=True)
class RegionRecord:
    region_id: str
    state: str
    year: int
    yield_kg_per_ha: float
    agri_area_ha: float
    district_id: str = ""

    def __post_init__(self):
        if not self.yield_kg_per_ha >= 0:
            raise InputError(f"{self.region_id}/{self.year}: yield must be non-negative")
        if not self.agri_area_ha > 0:
            raise InputError(f"{self.region_id}/{self.year}: agricultural area must be positive")


def apportion_yield(district_production, tehsil_areas):
    """Split a district's production across tehsils in proportion to agricultural area.

    Returns the production (kg) assigned to each tehsil. Dividing by the
    areas gives the per-tehsil yield, which under this rule is the same
    district-wide value for every tehsil.
    """
    areas = np.asarray(tehsil_areas, dtype=np.float64)
    if areas.size == 0:
        raise InputError("no tehsil areas given")
    if np.any(~(areas > 0)):
        raise InputError("tehsil areas must be positive")
    return list(district_production * areas / areas.sum())


def tehsil_yields(district_production, tehsil_areas):
    production = apportion_yield(district_production, tehsil_areas)
    return [p / a for p, a in zip(production, tehsil_areas)]


def fixture_path(name):
    """Path of a CSV shipped in the package's ``fixtures`` directory."""
    return os.path.join(os.path.dirname(os.path.abspath(__file__)), "fixtures", name)


@dataclass
class StateStats:
    state: str
    n_tehsils: int
    avg_area_ha: float
    avg_yield_kg_per_ha: float


def read_state_stats(path=None):
    """Per-state tehsil counts, mean area and mean yield (the 2011 statistics fixture by default)."""
    with open(path or fixture_path("state_stats.csv"), newline="") as fh:
        return [StateStats(r["state"], int(r["n_tehsils"]), float(r["avg_area_ha"]),
                           float(r["avg_yield_kg_per_ha"])) for r in csv.DictReader(fh)]


LABEL_FIELDS = ("region_id", "state", "year", "yield_kg_per_ha", "agri_area_ha", "district_id")


def write_labels(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_FIELDS)
        for r in records:
            w.writerow([r.region_id, r.state, r.year, repr(float(r.yield_kg_per_ha)),
                        repr(float(r.agri_area_ha)), r.district_id])


def read_labels(path):
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LABEL_FIELDS:
            raise InputError(f"{path}: header must be {','.join(LABEL_FIELDS)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(RegionRecord(row["region_id"], row["state"], int(row["year"]),
                                        float(row["yield_kg_per_ha"]), float(row["agri_area_ha"]),
                                        row["district_id"]))
            except (TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return out


# manifests -------------------------------------------------------------------

MANIFEST_HEADER = "# yieldnet manifest v1: region_id year raster_path"


@dataclass
class DatasetManifest:
    """Region-year records paired with raster paths (absolute or relative to ``root``)."""

    entries: list = field(default_factory=list)  # [(RegionRecord, path)]
    root: str = "."

    def __post_init__(self):
        seen = set()
        for rec, _ in self.entries:
            key = (rec.region_id, rec.year)
            if key in seen:
                raise InputError(f"duplicate raster for region {rec.region_id}, year {rec.year}")
            seen.add(key)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def records(self):
        return [rec for rec, _ in self.entries]

    @property
    def years(self):
        return sorted({rec.year for rec, _ in self.entries})

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def filter(self, predicate):
        return DatasetManifest([e for e in self.entries if predicate(e[0])], self.root)

    def sorted(self):
        return DatasetManifest(sorted(self.entries, key=lambda e: (e[0].region_id, e[0].year)), self.root)


def write_manifest(manifest, path, labels_path=None):
    """Write the line-oriented manifest and, alongside it, ``labels.csv``."""
    root = os.path.dirname(os.path.abspath(path))
    lines = [MANIFEST_HEADER]
    for rec, raster in manifest.sorted():
        rel = os.path.relpath(manifest.resolve(raster), root)
        lines.append(f"{rec.region_id}\t{rec.year}\t{rel}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    write_labels(manifest.sorted().records, labels_path or os.path.join(root, "labels.csv"))


def read_manifest(path, labels_path=None):
    root = os.path.dirname(os.path.abspath(path))
    labels_path = labels_path or os.path.join(root, "labels.csv")
    records = {(r.region_id, r.year): r for r in read_labels(labels_path)}
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise InputError(f"{path}:{lineno}: expected 'region_id<TAB>year<TAB>path'")
            try:
                key = (parts[0], int(parts[1]))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: bad year {parts[1]!r}") from exc
            if key not in records:
                raise InputError(f"{path}:{lineno}: no label for region {key[0]}, year {key[1]}")
            entries.append((records[key], parts[2]))
    return DatasetManifest(entries, root)


def split_by_year(manifest, train_years=range(2001, 2010), val_year=2010, test_year=2011):
    """Partition ``manifest`` into train, validation and test manifests by year."""
    train_years = set(int(y) for y in train_years)
    val_years = {int(val_year)} if isinstance(val_year, (int, np.integer)) else set(val_year)
    test_years = {int(test_year)} if isinstance(test_year, (int, np.integer)) else set(test_year)
    if train_years & val_years or train_years & test_years or val_years & test_years:
        raise InputError("train, validation and test years must be disjoint")
    return (manifest.filter(lambda r: r.year in train_years),
            manifest.filter(lambda r: r.year in val_years),
            manifest.filter(lambda r: r.year in test_years))


# normalization ---------------------------------------------------------------

@dataclass
class NormStats:
    """Per-band mean and standard deviation from the training split."""

    bands: tuple
    mean: np.ndarray
    std: np.ndarray
    flagged: tuple = ()  # continuous bands with zero variance, left unscaled

    def to_dict(self):
        return {"bands": [[b.name, b.kind] for b in self.bands],
                "mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(BandInfo(n, k) for n, k in d["bands"]), np.array(d["mean"]),
                   np.array(d["std"]), tuple(d["flagged"]))


def compute_norm_stats(sequences):
    """Statistics over an iterable of :class:`RasterSequence` (the training split)."""
    total = sq = None
    count = 0
    bands = None
    for seq in sequences:
        x = seq.data.reshape(-1, seq.data.shape[-1]).astype(np.float64)
        if bands is None:
            bands = seq.bands
            total = np.zeros(x.shape[1])
            sq = np.zeros(x.shape[1])
        elif seq.bands != bands:
            raise InputError(f"{seq.region_id}/{seq.year}: band layout differs from the first sequence")
        total += x.sum(axis=0)
        sq += np.square(x).sum(axis=0)
        count += x.shape[0]
    if count == 0:
        raise InputError("cannot compute statistics of an empty split")
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean ** 2, 0.0))
    flagged = []
    for k, band in enumerate(bands):
        if band.kind == MASK:
            mean[k], std[k] = 0.0, 1.0
        elif not std[k] > 1e-12 * max(1.0, abs(mean[k])):
            flagged.append(band.name)
            warnings.warn(f"band {band.name} has zero variance; passing it through unscaled",
                          RuntimeWarning, stacklevel=2)
            mean[k], std[k] = 0.0, 1.0
    return NormStats(tuple(bands), mean, std, tuple(flagged))


def normalize(seq, stats):
    """Z-score continuous bands with ``stats``; mask and flagged bands pass through."""
    if seq.bands != stats.bands:
        raise InputError("sequence bands do not match the normalization statistics")
    data = (seq.data - stats.mean.astype(np.float32)) / stats.std.astype(np.float32)
    return replace(seq, data=data)


def denormalize(seq, stats):
    data = seq.data.astype(np.float64) * stats.std + stats.mean
    return replace(seq, data=data.astype(np.float32))


# loading ---------------------------------------------------------------------

def load_sequences(manifest, agri_mask=False):
    """Read every raster in ``manifest``; returns ``(entries, skipped)``.

    ``entries`` pairs each :class:`RegionRecord` with its sequence; rasters
    that cannot be read are listed in ``skipped`` as ``(record, reason)``.
    """
    entries, skipped = [], []
    for rec, path in manifest.sorted():
        try:
            seq = read_raster(manifest.resolve(path), rec.region_id, rec.year)
        except (OSError, FormatError) as exc:
            skipped.append((rec, str(exc)))
            continue
        entries.append((rec, apply_agri_mask(seq) if agri_mask else seq))
    return entries, skipped


def to_samples(entries, stats):
    return [Sample(f"{rec.region_id}:{rec.year}", normalize(seq, stats).data, rec.yield_kg_per_ha,
                   rec.agri_area_ha, rec.state)
            for rec, seq in entries]


# key = value files -----------------------------------------------------------

def parse_key_values(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment. Errors name the line."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise InputError(f"{source}:{lineno}: empty key or value")
        if key in out:
            raise InputError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


# synthetic data ----------------------------------------------------------------

def _parse_bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes"):
        return True
    if value in ("0", "false", "no"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """A planted yield signal: ``label = coefficient * m + N(0, noise^2)``.

    ``m`` is the mean, over the four frames of ``month``, of the
    agriculture-masked spatial mean of ``band`` (1-based).
    """

    band: int = 2
    month: int = 1
    coefficient: float = 8000.0
    noise: float = 0.0
    n_regions: int = 8
    years: tuple = tuple(range(2001, 2012))
    image_size: int = 32
    timesteps: int = 24
    state: str = "Synthetia"
    frame_jitter: float = 0.5  # within-month spread of the planted level, relative to its between-region spread
    masked_signal: bool = False  # planted level only on agriculture pixels; elsewhere an unrelated level

    def __post_init__(self):
        object.__setattr__(self, "years", tuple(int(y) for y in self.years))
        n_cont = sum(b.kind == CONTINUOUS for b in DEFAULT_BANDS)
        if not 1 <= self.band <= n_cont:
            raise InputError(f"planted band must be a continuous band 1..{n_cont}, got {self.band}")
        n_months = self.timesteps // FRAMES_PER_MONTH
        if not 1 <= self.month <= n_months:
            raise InputError(f"planted month must lie in 1..{n_months}, got {self.month}")
        if self.n_regions < 1 or not self.years or self.image_size < 8:
            raise InputError("need at least one region, one year and an image of at least 8 pixels")
        if self.noise < 0:
            raise InputError("noise must be non-negative")

    @classmethod
    def from_text(cls, text, source="<spec>"):
        kv = parse_key_values(text, source)
        conv = {"band": int, "month": int, "coefficient": float, "noise": float, "n_regions": int,
                "image_size": int, "timesteps": int, "state": str, "frame_jitter": float,
                "masked_signal": _parse_bool}
        kwargs = {}
        for key, value in kv.items():
            try:
                if key == "years":
                    lo, _, hi = value.partition("-")
                    kwargs["years"] = tuple(range(int(lo), int(hi or lo) + 1))
                elif key in conv:
                    kwargs[key] = conv[key](value)
                else:
                    raise InputError(f"{source}: unknown key {key!r}")
            except ValueError as exc:
                raise InputError(f"{source}: bad value for {key!r}: {exc}") from exc
        return cls(**kwargs)

    def ground_truth_text(self):
        frames = [f + 1 for f in month_frames(self.month)]
        return (f"band = {self.band}\nmonth = {self.month}\ncoefficient = {self.coefficient!r}\n"
                f"noise = {self.noise!r}\nframes = {','.join(map(str, frames))}\n"
                f"state = {self.state}\nmasked_signal = {str(self.masked_signal).lower()}\n")


# (base, spread) per continuous band; reflectances are unitless, temperatures in K
_BAND_SCALE = [(0.12, 0.03), (0.30, 0.06), (0.08, 0.02), (0.11, 0.03), (0.28, 0.05), (0.22, 0.04),
               (0.15, 0.03), (300.0, 4.0), (285.0, 3.0)]


def planted_feature(seq, band, month):
    """Mean over the month's frames of the agriculture-masked mean of ``band`` (1-based)."""
    agri = seq.band(AGRI)
    values = seq.data[..., band - 1]
    frames = month_frames(month)
    per_frame = []
    for t in frames:
        w = agri[t].astype(np.float64)
        if w.sum() <= 0:
            raise InputError(f"{seq.region_id}/{seq.year}: no agriculture pixels in frame {t + 1}")
        per_frame.append(float((values[t] * w).sum() / w.sum()))
    return float(np.mean(per_frame))


def planted_label(seq, spec):
    return spec.coefficient * planted_feature(seq, spec.band, spec.month)


def _smooth_field(rng, size, sigma):
    f = gaussian_filter(rng.normal(size=(size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _land_cover(rng, size):
    sigma = size / 8.0
    agri_field = _smooth_field(rng, size, sigma)
    # agricultural share between 35% and 65% of the tile
    share = rng.uniform(0.35, 0.65)
    agri = agri_field > np.quantile(agri_field, 1.0 - share)
    water = (_smooth_field(rng, size, sigma) > 1.2) & ~agri
    urban = (_smooth_field(rng, size, sigma) > 1.0) & ~agri & ~water
    return water, agri, urban


def synthesize(spec, seed):
    """Generate ``(RegionRecord, RasterSequence)`` pairs for every region and year."""
    root = SeededRng(seed)
    n = spec.image_size
    planted_frames = set(month_frames(spec.month))
    prefix = "".join(ch for ch in spec.state.upper() if ch.isalnum())[:3] or "SYN"
    out = []
    for r in range(spec.n_regions):
        region_id = f"{prefix}-{r:03d}"
        cover_rng = root.child("cover", r)
        water, agri, urban = _land_cover(cover_rng, n)
        for year in spec.years:
            rng = root.child("frames", r, year)
            data = np.zeros((spec.timesteps, n, n, len(DEFAULT_BANDS)), dtype=np.float32)
            month_level = rng.normal()
            for t in range(spec.timesteps):
                for b, (base, spread) in enumerate(_BAND_SCALE):
                    if t in planted_frames and b == spec.band - 1:
                        level = month_level + spec.frame_jitter * rng.normal()
                    else:
                        level = rng.normal()
                    texture = 0.3 * _smooth_field(rng, n, n / 10.0)
                    if spec.masked_signal and t in planted_frames and b == spec.band - 1:
                        level = np.where(agri, level, rng.normal())
                    frame = base + spread * (level + texture)
                    data[t, :, :, b] = np.maximum(frame, 0.005 if base < 1 else 200.0)
                data[t, :, :, 9] = water
                data[t, :, :, 10] = agri
                data[t, :, :, 11] = urban
            seq = RasterSequence(region_id, year, data)
            label = planted_label(seq, spec) + (spec.noise * rng.child("label").normal() if spec.noise else 0.0)
            rec = RegionRecord(region_id, spec.state, year, max(label, 0.0),
                               float(agri.sum()) * PIXEL_AREA_HA, f"D{r // 4:03d}")
            out.append((rec, seq))
    return out


def generate_synthetic(spec, seed, out_dir):
    """Write a synthetic dataset: rasters, ``manifest.txt``, ``labels.csv``, ``ground_truth``.

    Returns the manifest.
    """
    raster_dir = os.path.join(out_dir, "rasters")
    os.makedirs(raster_dir, exist_ok=True)
    entries = []
    for rec, seq in synthesize(spec, seed):
        rel = os.path.join("rasters", f"{rec.region_id}_{rec.year}.ycst")
        write_raster(seq, os.path.join(out_dir, rel))
        entries.append((rec, rel))
    manifest = DatasetManifest(entries, os.path.abspath(out_dir))
    write_manifest(manifest, os.path.join(out_dir, "manifest.txt"))
    with open(os.path.join(out_dir, "ground_truth"), "w") as fh:
        fh.write(spec.ground_truth_text())
    return manifest


def monthly_means(seq, band, n_months=None):
    """Agriculture-masked mean of ``band`` per month; the baseline ground-truth feature."""
    n_months = n_months or seq.data.shape[0] // FRAMES_PER_MONTH
    return np.array([planted_feature(seq, band, m) for m in range(1, n_months + 1)])


def season_months(timesteps):
    return math.ceil(timesteps / FRAMES_PER_MONTH)
