"""Cine records: the on-disk container, augmentation, subject-level splits and phantoms.

A record directory holds ``meta.json``, ``image.raw`` (little-endian f32,
C-order ``[4, T, H, W]``) and ``mask.raw`` (uint8, ``[T, H, W]``, values 0/1).
A dataset directory adds ``manifest.json`` listing the record directories.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DataError, DimensionError, FormatError, LeakageError

FORMAT_VERSION = 1
CHANNEL_ORDER = ("magnitude", "v_x", "v_y", "v_z")
DEFAULT_SPACING_MM = (0.85, 0.85)
DEFAULT_VENC_CM_S = (15.0, 15.0, 30.0)

_META_KEYS = {"format_version", "subject_id", "slice_id", "dims", "dtype", "spacing_mm",
              "venc_cm_s", "channel_order"}


@dataclass
class CineRecord:
    subject_id: str
    slice_id: str
    image: np.ndarray  # [4, T, H, W] float32
    mask: np.ndarray  # [T, H, W] uint8
    spacing_mm: tuple = DEFAULT_SPACING_MM
    venc_cm_s: tuple = DEFAULT_VENC_CM_S

    @property
    def frames(self) -> int:
        return self.image.shape[1]

    @property
    def spatial(self) -> tuple:
        return self.image.shape[2:]

    @property
    def name(self) -> str:
        return f"{self.subject_id}/{self.slice_id}"

    def validate(self) -> "CineRecord":
        if not self.subject_id:
            raise DataError("subject_id must be nonempty")
        img, mask = self.image, self.mask
        if img.ndim != 4 or img.shape[0] != len(CHANNEL_ORDER):
            raise DimensionError(f"image must be [4,T,H,W], got {img.shape}", record=self.name)
        if mask.shape != img.shape[1:]:
            raise DimensionError(f"mask {mask.shape} does not match image frames {img.shape[1:]}",
                                 record=self.name)
        bad = np.flatnonzero(mask > 1)
        if bad.size:
            raise DimensionError(f"mask value {int(mask.reshape(-1)[bad[0]])} at flat index {bad[0]} "
                                 "(mask must be 0/1)", record=self.name)
        if len(self.venc_cm_s) != 3 or len(self.spacing_mm) != 2:
            raise DimensionError("venc needs 3 entries and spacing 2", record=self.name)
        for ch, venc in enumerate(self.venc_cm_s, start=1):
            peak = float(np.abs(img[ch]).max(initial=0.0))
            if not peak <= venc:
                raise DataError(f"{CHANNEL_ORDER[ch]} reaches {peak:.4g} cm/s above venc {venc}",
                                record=self.name)
        return self

    def meta(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "subject_id": self.subject_id,
            "slice_id": self.slice_id,
            "dims": [int(d) for d in self.image.shape],
            "dtype": "f32le",
            "spacing_mm": [float(s) for s in self.spacing_mm],
            "venc_cm_s": [float(v) for v in self.venc_cm_s],
            "channel_order": list(CHANNEL_ORDER),
        }


def make_record(subject_id, slice_id, image, mask, spacing_mm=DEFAULT_SPACING_MM,
                venc_cm_s=DEFAULT_VENC_CM_S) -> CineRecord:
    rec = CineRecord(str(subject_id), str(slice_id), np.ascontiguousarray(image, dtype=np.float32),
                     np.ascontiguousarray(mask, dtype=np.uint8), tuple(float(s) for s in spacing_mm),
                     tuple(float(v) for v in venc_cm_s))
    return rec.validate()


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

def save_record(rec: CineRecord, path) -> Path:
    rec.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    text = json.dumps(rec.meta(), indent=2, sort_keys=True) + "\n"
    (path / "meta.json").write_text(text, encoding="utf-8")
    (path / "image.raw").write_bytes(rec.image.astype("<f4", copy=False).tobytes(order="C"))
    write_mask(rec.mask, path / "mask.raw")
    return path


def write_mask(mask: np.ndarray, path) -> None:
    np.ascontiguousarray(mask, dtype=np.uint8).tofile(str(path))


def _read_meta(path: Path) -> dict:
    try:
        raw = (path / "meta.json").read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing meta.json in {path}", record=str(path)) from None
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = getattr(exc, "pos", None)
        if offset is None:
            offset = getattr(exc, "start", None)
        raise FormatError(f"meta.json is not valid UTF-8 JSON: {exc}", offset=offset,
                          record=str(path)) from None
    if not isinstance(meta, dict):
        raise FormatError("meta.json must hold an object", offset=0, record=str(path))
    missing = _META_KEYS - set(meta)
    if missing:
        raise FormatError(f"meta.json lacks {sorted(missing)}", record=str(path))
    if meta["format_version"] != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {meta['format_version']}", record=str(path))
    if meta["dtype"] != "f32le":
        raise FormatError(f"unsupported dtype {meta['dtype']!r}", record=str(path))
    if list(meta["channel_order"]) != list(CHANNEL_ORDER):
        raise FormatError(f"channel_order must be {list(CHANNEL_ORDER)}", record=str(path))
    dims = meta["dims"]
    if (not isinstance(dims, list) or len(dims) != 4
            or not all(isinstance(d, int) and d > 0 for d in dims)):
        raise DimensionError(f"dims must be four positive integers, got {dims}", record=str(path))
    if dims[0] != len(CHANNEL_ORDER):
        raise DimensionError(f"dims declare {dims[0]} channels, expected 4", record=str(path))
    return meta


def _read_payload(file: Path, expected: int, dtype, record: str) -> np.ndarray:
    try:
        data = file.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing {file.name}", record=record) from None
    if len(data) != expected:
        # the offset is where the payload stops matching the header's byte count
        raise FormatError(f"{file.name} holds {len(data)} bytes, header implies {expected}",
                          offset=min(len(data), expected), record=record)
    return np.frombuffer(data, dtype=dtype)


def load_record(path) -> CineRecord:
    path = Path(path)
    name = str(path)
    meta = _read_meta(path)
    c, t, h, w = meta["dims"]
    img = _read_payload(path / "image.raw", 4 * c * t * h * w, "<f4", name)
    mask = _read_payload(path / "mask.raw", t * h * w, np.uint8, name)
    bad = np.flatnonzero(mask > 1)
    if bad.size:
        raise DimensionError(f"mask.raw byte {int(bad[0])} holds {int(mask[bad[0]])} (must be 0/1)",
                             record=name)
    rec = CineRecord(str(meta["subject_id"]), str(meta["slice_id"]),
                     img.astype(np.float32).reshape(c, t, h, w),
                     mask.copy().reshape(t, h, w),
                     tuple(meta["spacing_mm"]), tuple(meta["venc_cm_s"]))
    try:
        return rec.validate()
    except DataError as exc:
        if exc.record is None:
            exc.record = name
        raise


# ---------------------------------------------------------------------------
# manifest and datasets
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    subject_id: str
    slice_id: str
    path: str


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def validate(self):
        seen = set()
        for e in self.records:
            if not e.subject_id:
                raise DataError(f"manifest entry {e.path!r} has an empty subject_id")
            if e.path in seen:
                raise DataError(f"duplicate manifest path {e.path!r}")
            seen.add(e.path)
        return self

    @property
    def subjects(self) -> list:
        return sorted({e.subject_id for e in self.records})

    def to_dict(self) -> dict:
        return {"format_version": self.format_version,
                "records": [{"subject_id": e.subject_id, "slice_id": e.slice_id, "path": e.path}
                            for e in self.records]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        try:
            entries = [ManifestEntry(str(r["subject_id"]), str(r["slice_id"]), str(r["path"]))
                       for r in d["records"]]
            version = int(d.get("format_version", FORMAT_VERSION))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed manifest: {exc}") from None
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest format_version {version}")
        return cls(entries, version).validate()


def manifest_path(root) -> Path:
    root = Path(root)
    return root if root.name.endswith(".json") else root / "manifest.json"


def load_manifest(path) -> DatasetManifest:
    path = manifest_path(path)
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc.msg}", offset=exc.pos) from None
    return DatasetManifest.from_dict(d)


def save_dataset(records, root) -> DatasetManifest:
    """Write each record to ``root/<subject>_<slice>`` and a manifest listing them."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        rel = f"{rec.subject_id}_{rec.slice_id}"
        save_record(rec, root / rel)
        entries.append(ManifestEntry(rec.subject_id, rec.slice_id, rel))
    manifest = DatasetManifest(entries).validate()
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n"
    (root / "manifest.json").write_text(text, encoding="utf-8")
    return manifest


class RecordStore:
    """Manifest-backed record access with an access log.

    Subjects passed to :meth:`forbid` raise :class:`LeakageError` when any of
    their records is requested; this is how the trainer proves that test
    subjects are never touched.
    """

    def __init__(self, manifest: DatasetManifest, root, cache: bool = True):
        self.manifest = manifest
        self.root = Path(root)
        self.access_log = []
        self._forbidden = set()
        self._cache = {} if cache else None

    @classmethod
    def open(cls, path, cache=True) -> "RecordStore":
        mpath = manifest_path(path)
        return cls(load_manifest(mpath), mpath.parent, cache)

    def __len__(self):
        return len(self.manifest.records)

    def subject_of(self, idx: int) -> str:
        return self.manifest.records[idx].subject_id

    def indices_for(self, subjects) -> list:
        subjects = set(subjects)
        return [i for i, e in enumerate(self.manifest.records) if e.subject_id in subjects]

    def forbid(self, subjects):
        self._forbidden = set(subjects)

    def allow_all(self):
        self._forbidden = set()

    def get(self, idx: int) -> CineRecord:
        entry = self.manifest.records[idx]
        if entry.subject_id in self._forbidden:
            raise LeakageError(f"record {entry.path!r} of held-out subject {entry.subject_id!r} "
                               "was requested", record=entry.path)
        self.access_log.append((idx, entry.subject_id))
        if self._cache is not None and idx in self._cache:
            return self._cache[idx]
        try:
            rec = load_record(self.root / entry.path)
        except DataError as exc:
            exc.record = entry.path
            raise
        if rec.subject_id != entry.subject_id:
            raise DataError(f"manifest says subject {entry.subject_id!r}, record says "
                            f"{rec.subject_id!r}", record=entry.path)
        if self._cache is not None:
            self._cache[idx] = rec
        return rec

    def subjects_touched(self) -> set:
        return {s for _, s in self.access_log}


# ---------------------------------------------------------------------------
# augmentation and network input
# ---------------------------------------------------------------------------

ROTATIONS = (90, 180, 270)


def rotate_augment(rec: CineRecord, angle: int | None = None, seed: int = 0) -> CineRecord:
    """Rotate every channel and the mask counter-clockwise by ``angle`` degrees.

    Only the pixel layout moves; in-plane velocity components keep their
    values.  With ``angle=None`` the angle is drawn from ``ROTATIONS`` using
    ``seed``.
    """
    if angle is None:
        angle = int(np.random.default_rng(seed).choice(ROTATIONS))
    if angle % 90:
        raise ValueError(f"angle must be a multiple of 90, got {angle}")
    k = (angle // 90) % 4
    image = np.ascontiguousarray(np.rot90(rec.image, k, axes=(2, 3)))
    mask = np.ascontiguousarray(np.rot90(rec.mask, k, axes=(1, 2)))
    spacing = rec.spacing_mm if k % 2 == 0 else rec.spacing_mm[::-1]
    return CineRecord(rec.subject_id, rec.slice_id, image, mask, tuple(spacing), rec.venc_cm_s)


def network_input(rec: CineRecord, dtype=np.float32) -> np.ndarray:
    """``[1, 4, T, H, W]`` array: magnitude min-max scaled to [0, 1], velocities divided by venc."""
    img = rec.image.astype(np.float64)
    out = np.empty_like(img)
    mag = img[0]
    lo, hi = mag.min(), mag.max()
    out[0] = (mag - lo) / (hi - lo) if hi > lo else 0.0
    for ch, venc in enumerate(rec.venc_cm_s, start=1):
        out[ch] = img[ch] / venc
    return out[None].astype(dtype)


# ---------------------------------------------------------------------------
# subject-level split
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    train_subjects: list
    test_subjects: list
    folds: list

    def validate(self):
        train, test = set(self.train_subjects), set(self.test_subjects)
        if train & test:
            raise LeakageError(f"subjects on both sides of the split: {sorted(train & test)}")
        if self.folds:
            flat = [s for f in self.folds for s in f]
            if len(flat) != len(set(flat)) or set(flat) != train:
                raise LeakageError("folds do not partition the training subjects")
        return self

    def fold(self, j: int) -> tuple:
        """(training subjects, validation subjects) of fold ``j``."""
        val = list(self.folds[j])
        return [s for s in self.train_subjects if s not in set(val)], val

    def to_dict(self) -> dict:
        return {"train_subjects": list(self.train_subjects), "test_subjects": list(self.test_subjects),
                "folds": [list(f) for f in self.folds]}


def make_split(subject_ids, test_fraction: float = 0.2, k: int = 5, seed: int = 0) -> SplitPlan:
    """Shuffle unique subjects, hold out ``round_half_up(n * test_fraction)`` for testing
    and deal the rest round-robin into ``k`` folds (``k <= 1`` means no folds)."""
    subjects = sorted(set(str(s) for s in subject_ids))
    n = len(subjects)
    if not 0 <= test_fraction < 1:
        raise ConfigError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    n_test = math.floor(n * test_fraction + 0.5)
    n_train = n - n_test
    k_eff = max(k, 1)
    if n < k_eff + 1 or n_train < k_eff:
        raise ConfigError(f"{n} subjects cannot give {n_test} test subjects and {k} folds")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [subjects[i] for i in order]
    test = sorted(shuffled[:n_test])
    train_order = shuffled[n_test:]
    folds = []
    if k > 1:
        folds = [sorted(train_order[j::k]) for j in range(k)]
    return SplitPlan(sorted(train_order), test, folds).validate()


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    v_r: float = 3.0
    v_c: float = 2.0
    v_z: float = 8.0
    sigma_n: float = 0.5
    magnitude_noise: float = 0.1
    spacing_mm: tuple = DEFAULT_SPACING_MM
    venc_cm_s: tuple = DEFAULT_VENC_CM_S
    records_per_subject: int = 1


def phantom_geometry(t: int, frames: int, h: int, w: int, params: dict) -> tuple:
    """Centre (row, col) and inner/outer radii in pixels of frame ``t``."""
    phase = 2 * np.pi * t / frames
    cr = h / 2 + params["drift"] * np.sin(phase + params["phi"])
    cc = w / 2 + params["drift"] * np.cos(phase + params["phi"])
    pulse = 1.0 + params["pulse"] * np.cos(phase)
    return (cr, cc), params["r_in"] * pulse, params["r_out"] * pulse


def _phantom_frame(rng, t, frames, h, w, params, spec: PhantomSpec):
    (cr, cc), r_in, r_out = phantom_geometry(t, frames, h, w, params)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dist = np.hypot(rows - cr, cols - cc)
    mask = (dist >= r_in) & (dist <= r_out)
    sr, sc = spec.spacing_mm
    dr, dc = (rows - cr) * sr, (cols - cc) * sc
    norm = np.hypot(dr, dc)
    safe = np.where(norm > 0, norm, 1.0)
    ur, uc = dr / safe, dc / safe
    phase = 2 * np.pi * t / frames
    vr = spec.v_r * np.cos(phase)
    vc = spec.v_c * np.sin(phase)
    # in-plane vector in (row, col) components; tangent is (-u_col, u_row)
    v_row = vr * ur - vc * uc
    v_col = vr * uc + vc * ur
    v_z = np.full((h, w), spec.v_z * np.cos(phase))
    vel = [np.where(mask, v, 0.0) for v in (v_col, v_row, v_z)]
    mag = gaussian_filter(mask.astype(np.float64), sigma=1.0)
    if spec.magnitude_noise:
        mag = mag + rng.normal(0.0, spec.magnitude_noise, size=(h, w))
    if spec.sigma_n:
        vel = [v + rng.normal(0.0, spec.sigma_n, size=(h, w)) for v in vel]
    vel = [np.clip(v, -venc, venc) for v, venc in zip(vel, spec.venc_cm_s)]
    return np.stack([mag] + vel), mask.astype(np.uint8)


def generate_phantom(n_records: int, frames: int, h: int, w: int, seed: int = 0,
                     spec: PhantomSpec | None = None) -> list:
    """Annular "myocardium" records with a known velocity field.

    Radial speed ``v_r cos(2 pi t/T)`` (outward positive), circumferential
    ``v_c sin(2 pi t/T)`` and through-plane ``v_z cos(2 pi t/T)`` inside the
    ring, zero outside, plus Gaussian noise ``sigma_n`` on each velocity
    channel.  Record ``i`` draws from its own stream seeded by ``(seed, i)``.
    """
    spec = spec or PhantomSpec()
    if h % 2 or w % 2:
        raise ConfigError(f"phantom H and W must be even, got {h}x{w}")
    if n_records < 1 or frames < 1:
        raise ConfigError("phantoms need at least one record and one frame")
    size = min(h, w)
    records = []
    for i in range(n_records):
        rng = np.random.default_rng([seed, i])
        r_out = size * rng.uniform(0.26, 0.34)
        params = {
            "r_out": r_out,
            "r_in": r_out * rng.uniform(0.55, 0.7),
            "pulse": rng.uniform(0.05, 0.12),
            "drift": size * rng.uniform(0.0, 0.04),
            "phi": rng.uniform(0, 2 * np.pi),
        }
        image = np.empty((4, frames, h, w), dtype=np.float32)
        mask = np.empty((frames, h, w), dtype=np.uint8)
        for t in range(frames):
            image[:, t], mask[t] = _phantom_frame(rng, t, frames, h, w, params, spec)
        subject = f"P{i // spec.records_per_subject:03d}"
        records.append(make_record(subject, f"s{i % spec.records_per_subject:02d}", image, mask,
                                   spec.spacing_mm, spec.venc_cm_s))
    return records

