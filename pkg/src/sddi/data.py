"""Dataset plumbing: image ingestion, pair construction, splitting, and
the PubChem image fetch client.

Images are decoded to grayscale by the luminosity formula and normalized
by 255 exactly.  Pair lists are canonicalized so each unordered drug
pair appears at most once regardless of how the interactions file
orders it.
"""

from __future__ import annotations

import csv
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "IngestionError",
    "DrugRecord",
    "GrayImage",
    "PairExample",
    "SplitDataset",
    "load_image",
    "save_image",
    "rotate90",
    "build_pairs",
    "split",
    "read_manifest",
    "write_manifest",
    "read_interactions",
    "write_interactions",
    "RateLimiter",
    "fetch_pubchem_png",
    "PUBCHEM_PNG_URL",
]

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
PUBCHEM_PNG_URL = "https://pubchem.ncbi.nlm.nih.gov/rest/pug/compound/cid/{cid}/PNG"

# Grayscale conversion weights (luminosity formula).
LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114


class IngestionError(ValueError):
    """Raised when an input file cannot be read or parsed; names the path."""


@dataclass(frozen=True)
class DrugRecord:
    drug_id: str
    name: str
    image_path: str


@dataclass
class GrayImage:
    """A grayscale image with row-major float pixels in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 2:
            raise ValueError(f"pixels must be 2-D, got shape {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class PairExample:
    """One unordered drug pair; label 1 means the drugs interact."""

    a: str
    b: str
    label: int

    def __post_init__(self):
        if self.a >= self.b:
            raise ValueError(f"pair must be in canonical order a < b, got ({self.a!r}, {self.b!r})")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class SplitDataset:
    train: List[PairExample]
    test: List[PairExample]
    seed: int


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------


def load_image(path) -> GrayImage:
    """Decode a PNG to grayscale floats in [0, 1].

    Color images are converted with 0.299R + 0.587G + 0.114B; the result
    (and already-gray input) is divided by 255 exactly.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode == "L":
                arr = np.asarray(img, dtype=np.float64)
            else:
                if img.mode not in ("RGB", "RGBA"):
                    img = img.convert("RGB")
                rgb = np.asarray(img, dtype=np.float64)[..., :3]
                arr = LUMA_R * rgb[..., 0] + LUMA_G * rgb[..., 1] + LUMA_B * rgb[..., 2]
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return GrayImage((arr / 255.0).astype(np.float32))


def save_image(img: GrayImage, path) -> None:
    """Write an 8-bit grayscale PNG (atomic temp-file + rename)."""
    path = Path(path)
    data = np.round(img.pixels.astype(np.float64) * 255.0).astype(np.uint8)
    _atomic_write(path, lambda tmp: Image.fromarray(data, mode="L").save(tmp, format="PNG"))


def rotate90(img: GrayImage, quarter_turns: int = 1) -> GrayImage:
    """Exact counterclockwise rotation by 90 degree increments."""
    return GrayImage(np.rot90(img.pixels, quarter_turns).copy())


# ---------------------------------------------------------------------------
# Pair construction and splitting
# ---------------------------------------------------------------------------


def build_pairs(
    manifest: Sequence[DrugRecord],
    interactions: Iterable[Tuple[str, str, int]],
) -> List[PairExample]:
    """Canonicalize labeled drug pairs: unordered dedup, self-pairs dropped.

    Reciprocal duplicates with the same label collapse to one pair;
    conflicting labels for one unordered pair are an error, as is any
    drug id missing from the manifest.  Output is sorted by (a, b).
    """
    known = set()
    for rec in manifest:
        if rec.drug_id in known:
            raise ValueError(f"duplicate drug_id in manifest: {rec.drug_id!r}")
        known.add(rec.drug_id)

    labels: Dict[Tuple[str, str], int] = {}
    for a, b, label in interactions:
        if a not in known:
            raise ValueError(f"unknown drug_id in interactions: {a!r}")
        if b not in known:
            raise ValueError(f"unknown drug_id in interactions: {b!r}")
        label = int(label)
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r} for pair ({a!r}, {b!r})")
        if a == b:
            continue
        key = (a, b) if a < b else (b, a)
        seen = labels.get(key)
        if seen is None:
            labels[key] = label
        elif seen != label:
            raise ValueError(f"conflicting labels for pair {key}: {seen} vs {label}")
    return [PairExample(a, b, label) for (a, b), label in sorted(labels.items())]


def split(pairs: Sequence[PairExample], fraction: float = 0.66, seed: int = 0) -> SplitDataset:
    """Seeded uniform shuffle, then a floor(n * fraction) prefix as train."""
    if not pairs:
        raise ValueError("cannot split an empty pair list")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = math.floor(len(pairs) * fraction)
    shuffled = [pairs[i] for i in order]
    return SplitDataset(train=shuffled[:n_train], test=shuffled[n_train:], seed=seed)


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------

MANIFEST_HEADER = ["drug_id", "name", "image_path"]
INTERACTIONS_HEADER = ["drug_id_a", "drug_id_b", "label"]


def read_manifest(path) -> List[DrugRecord]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MANIFEST_HEADER:
                raise IngestionError(f"bad manifest header in {path}: {header}")
            records = []
            for row in reader:
                if len(row) != 3:
                    raise IngestionError(f"bad manifest row in {path}: {row}")
                records.append(DrugRecord(drug_id=row[0], name=row[1], image_path=row[2]))
    except OSError as exc:
        raise IngestionError(f"cannot read manifest {path}: {exc}") from exc
    return records


def write_manifest(records: Sequence[DrugRecord], path) -> None:
    path = Path(path)

    def writer(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(MANIFEST_HEADER)
            for rec in records:
                w.writerow([rec.drug_id, rec.name, rec.image_path])

    _atomic_write(path, writer)


def read_interactions(path) -> List[Tuple[str, str, int]]:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != INTERACTIONS_HEADER:
                raise IngestionError(f"bad interactions header in {path}: {header}")
            rows = []
            for row in reader:
                if len(row) != 3 or row[2] not in ("0", "1"):
                    raise IngestionError(f"bad interactions row in {path}: {row}")
                rows.append((row[0], row[1], int(row[2])))
    except OSError as exc:
        raise IngestionError(f"cannot read interactions {path}: {exc}") from exc
    return rows


def write_interactions(rows: Iterable[Tuple[str, str, int]], path) -> None:
    path = Path(path)

    def writer(tmp):
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(INTERACTIONS_HEADER)
            for a, b, label in rows:
                w.writerow([a, b, label])

    _atomic_write(path, writer)


def _atomic_write(path: Path, write_fn: Callable[[str], None]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        write_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PubChem fetch
# ---------------------------------------------------------------------------


@dataclass
class RateLimiter:
    """Global request throttle: at most max_per_second calls per second."""

    max_per_second: float = 5.0
    clock: Callable[[], float] = time.monotonic
    sleep: Callable[[float], None] = time.sleep
    _next_allowed: float = field(default=0.0, init=False)

    def wait(self) -> None:
        now = self.clock()
        if now < self._next_allowed:
            self.sleep(self._next_allowed - now)
            now = self._next_allowed
        self._next_allowed = now + 1.0 / self.max_per_second


_DEFAULT_LIMITER = RateLimiter()


def fetch_pubchem_png(
    cid: str,
    out_dir,
    image_size: str = "500x500",
    session=None,
    limiter: Optional[RateLimiter] = None,
    retries: int = 3,
    backoff: float = 0.5,
    timeout: float = 30.0,
) -> Path:
    """Download one compound structure image; idempotent per CID.

    Existing files are returned without any request.  Server errors and
    timeouts are retried with exponential backoff; 404 means the CID is
    unknown and is not retried.  The body must be a PNG.
    """
    if not cid.isdigit():
        raise ValueError(f"CID must be numeric, got {cid!r}")
    out_dir = Path(out_dir)
    path = out_dir / f"{cid}.png"
    if path.exists():
        return path

    if session is None:
        import requests

        session = requests.Session()
    limiter = limiter or _DEFAULT_LIMITER
    url = PUBCHEM_PNG_URL.format(cid=cid)

    last_error: Optional[Exception] = None
    for attempt in range(retries + 1):
        if attempt > 0:
            limiter.sleep(backoff * 2 ** (attempt - 1))
        limiter.wait()
        try:
            response = session.get(url, params={"image_size": image_size}, timeout=timeout)
        except Exception as exc:  # timeouts, connection resets
            last_error = exc
            continue
        status = response.status_code
        if status == 404:
            raise IngestionError(f"unknown CID {cid}")
        if 500 <= status < 600:
            last_error = IngestionError(f"server error {status} fetching CID {cid}")
            continue
        if status != 200:
            raise IngestionError(f"unexpected status {status} fetching CID {cid}")
        if not response.content.startswith(PNG_MAGIC):
            raise IngestionError(f"non-PNG body for CID {cid}")
        _atomic_write(path, lambda tmp: Path(tmp).write_bytes(response.content))
        return path
    raise IngestionError(
        f"failed to fetch CID {cid} after {retries + 1} attempts: {last_error}"
    )
