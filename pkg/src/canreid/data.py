"""Manifests, image blobs, PK batch sampling and a synthetic identity generator.

Images live on disk as pre-decoded CANT blobs of shape [3, H, W] holding 0-255
intensities (the layout an external JPEG converter is expected to produce).
"""
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import blob

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
_MARKET_NAME = re.compile(r"^(-?\d+)_c(\d+)")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    person_id: int
    camera_id: int
    split: str
    path: str  # relative to the manifest's directory

    def to_json(self) -> str:
        return json.dumps({"id": self.person_id, "cam": self.camera_id,
                           "split": self.split, "file": self.path})


class Manifest:
    def __init__(self, records: list[SampleRecord], root: str | os.PathLike = "."):
        self.records = list(records)
        self.root = Path(root)
        seen = set()
        for r in self.records:
            if r.path in seen:
                raise ManifestError(f"duplicate path {r.path}")
            seen.add(r.path)
        self.index: dict[str, dict[int, list[int]]] = {s: {} for s in SPLITS}
        for i, r in enumerate(self.records):
            self.index[r.split].setdefault(r.person_id, []).append(i)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == name]

    def train_ids(self) -> list[int]:
        return sorted(pid for pid in self.index["train"] if pid >= 0)

    def blob_path(self, i: int) -> Path:
        return self.root / self.records[i].path

    def validate_pk(self, P: int, K: int) -> None:
        ids = self.train_ids()
        if len(ids) < P:
            raise ManifestError(f"need at least P={P} train ids, found {len(ids)}")
        short = [pid for pid in ids if len(self.index["train"][pid]) < K]
        if short:
            raise ManifestError(f"train ids with fewer than K={K} samples: {short[:10]}")

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(r.to_json() + "\n" for r in self.records))


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> Manifest:
    """Parse a JSON-lines manifest; blob paths resolve against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = SampleRecord(int(obj["id"]), int(obj["cam"]), str(obj["split"]), str(obj["file"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {rec.split!r}")
            if rec.person_id < -1 or rec.camera_id < 0:
                raise ManifestError(f"{path}:{lineno}: invalid id/camera")
            if check_files and not (path.parent / rec.path).exists():
                raise ManifestError(f"{path}:{lineno}: missing blob {rec.path}")
            records.append(rec)
    try:
        return Manifest(records, path.parent)
    except ManifestError as exc:
        raise ManifestError(f"{path}: {exc}") from exc


def parse_market_name(name: str) -> tuple[int, int]:
    """'0002_c1s1_000451_03.cant' -> (2, 0); camera numbers become 0-based."""
    m = _MARKET_NAME.match(Path(name).name)
    if not m:
        raise ManifestError(f"not a Market-1501 style name: {name}")
    return int(m.group(1)), int(m.group(2)) - 1


def manifest_from_market_dirs(root: str | os.PathLike, dirs: dict[str, str] | None = None) -> Manifest:
    """Build a manifest from Market-style folders of converted blobs."""
    root = Path(root)
    dirs = dirs or {"train": "bounding_box_train", "query": "query", "gallery": "bounding_box_test"}
    records = []
    for split, sub in dirs.items():
        for f in sorted((root / sub).glob("*.cant")):
            pid, cam = parse_market_name(f.name)
            if split == "train" and pid < 0:
                continue
            records.append(SampleRecord(pid, cam, split, str(f.relative_to(root))))
    return Manifest(records, root)


# images -----------------------------------------------------------------------


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of [C,H,W] with corner pixels aligned."""
    _, H, W = img.shape
    if (H, W) == (out_h, out_w):
        return img.copy()

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = coords(H, out_h)
    x0, x1, wx = coords(W, out_w)
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy)[None, :, None] + bot * wy[None, :, None]


def normalize_image(img: np.ndarray, mean=0.5, std=0.5) -> np.ndarray:
    """0-255 intensities -> [0, 1] -> (x - mean) / std per channel."""
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1)
    return (img / 255.0 - mean) / std


def load_image_tensor(path: str | os.PathLike, target_h: int, target_w: int,
                      mean=0.5, std=0.5, dtype=np.float64) -> np.ndarray:
    try:
        img = blob.read_blob(path)
    except blob.BlobError as exc:
        raise blob.BlobError(f"{path}: {exc}") from exc
    if img.ndim != 3 or img.shape[0] != 3:
        raise blob.BlobError(f"{path}: expected a [3,H,W] image, got shape {img.shape}")
    img = bilinear_resize(img.astype(np.float64), target_h, target_w)
    return normalize_image(img, mean, std).astype(dtype)


class ImageStore:
    """Loads and caches preprocessed images of a manifest by record index."""

    def __init__(self, manifest: Manifest, h: int, w: int, mean=0.5, std=0.5, dtype=np.float64):
        self.manifest = manifest
        self.h, self.w, self.mean, self.std, self.dtype = h, w, mean, std, dtype
        self._cache: dict[int, np.ndarray] = {}

    def __getitem__(self, i: int) -> np.ndarray:
        img = self._cache.get(i)
        if img is None:
            img = load_image_tensor(self.manifest.blob_path(i), self.h, self.w,
                                    self.mean, self.std, self.dtype)
            self._cache[i] = img
        return img

    def batch(self, indices) -> np.ndarray:
        return np.stack([self[int(i)] for i in indices])


# sampling ---------------------------------------------------------------------


class PKSampler:
    """Batches of P distinct identities with K images each.

    Within an epoch each identity's images are shuffled and consumed in chunks
    of K without replacement; identities with fewer than K images are padded
    by sampling with replacement (a warning is logged). When fewer than P
    identities still have chunks left, the last batch is topped up with fresh
    chunks of other identities so every identity appears in every epoch.
    """

    def __init__(self, manifest: Manifest, P: int, K: int, seed: int = 0):
        if P < 1 or K < 1:
            raise ValueError("P and K must be positive")
        self.manifest = manifest
        self.P, self.K = P, K
        self.ids = manifest.train_ids()
        if len(self.ids) < P:
            raise ManifestError(f"need at least P={P} train ids, found {len(self.ids)}")
        self.pools = {pid: list(manifest.index["train"][pid]) for pid in self.ids}
        short = [pid for pid, pool in self.pools.items() if len(pool) < K]
        if short:
            log.warning("%d ids have fewer than K=%d images; sampling them with replacement",
                        len(short), K)
        self.rng = np.random.default_rng(seed)
        self.epoch = 0

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def _chunks(self, pid: int) -> list[list[int]]:
        pool = self.pools[pid]
        if len(pool) < self.K:
            return [list(self.rng.choice(pool, size=self.K, replace=True))]
        order = list(self.rng.permutation(pool))
        return [order[i:i + self.K] for i in range(0, len(order) - self.K + 1, self.K)]

    def epoch_batches(self) -> list[tuple[list[int], list[int]]]:
        """One epoch as (record indices, person ids) pairs."""
        chunks = {pid: self._chunks(pid) for pid in self.ids}
        batches = []
        while True:
            live = [pid for pid in self.ids if chunks[pid]]
            if not live:
                break
            if len(live) >= self.P:
                chosen = [live[i] for i in self.rng.choice(len(live), self.P, replace=False)]
            else:
                others = [pid for pid in self.ids if pid not in live]
                fill = [others[i] for i in self.rng.choice(len(others), self.P - len(live), replace=False)]
                chosen = live + fill
                for pid in fill:
                    chunks[pid] = [self._chunks(pid)[0]]
            idx, pids = [], []
            for pid in chosen:
                idx.extend(int(i) for i in chunks[pid].pop())
                pids.extend([pid] * self.K)
            batches.append((idx, pids))
        self.epoch += 1
        return batches

    def __iter__(self) -> Iterator[tuple[list[int], list[int]]]:
        while True:
            yield from self.epoch_batches()


def pk_batches(manifest: Manifest, P: int, K: int, seed: int = 0) -> Iterator[list[int]]:
    """Endless deterministic stream of PK index batches."""
    for idx, _ in PKSampler(manifest, P, K, seed):
        yield idx


# synthetic data ----------------------------------------------------------------


def _palette(rng: np.random.Generator, n: int = 8) -> np.ndarray:
    return rng.uniform(30, 225, size=(n, 3))


def _id_patterns(rng: np.random.Generator, num_ids: int, h: int, w: int,
                 n_blocks: int = 5, min_diff: int = 3) -> np.ndarray:
    """Per-id vertical colour strata drawn from a shared palette.

    Any two ids differ in at least ``min_diff`` strata, while many ids share
    some of theirs.
    """
    palette = _palette(rng)
    combos: list[np.ndarray] = []
    patterns = np.empty((num_ids, 3, h, w))
    base_edges = np.linspace(0, h, n_blocks + 1).round().astype(int)
    for pid in range(num_ids):
        for _ in range(10_000):
            combo = rng.integers(0, len(palette), n_blocks)
            if all(np.count_nonzero(combo != c) >= min_diff for c in combos):
                break
        else:
            raise ValueError(f"cannot draw {num_ids} patterns differing in {min_diff} strata")
        combos.append(combo)
        jitter = rng.integers(-(h // 32), h // 32 + 1, size=n_blocks + 1)
        jitter[0] = jitter[-1] = 0
        edges = np.clip(base_edges + jitter, 0, h)
        for b, c in enumerate(combo):
            patterns[pid, :, edges[b]:edges[b + 1], :] = palette[c][:, None, None]
    return patterns


def generate_synthetic(out_dir: str | os.PathLike, num_ids: int = 16, per_id: int = 8,
                       h: int = 96, w: int = 32, seed: int = 0, noise: float = 0.3,
                       num_cams: int = 2) -> Manifest:
    """Write a toy re-identification dataset (blobs + manifest.jsonl) into ``out_dir``.

    Each identity is a stack of flat colour strata, a crude stand-in for
    clothing. ``noise`` scales every nuisance factor together: vertical
    jitter, a per-camera colour cast, a random occluding patch and pixel
    noise. ``noise=0`` makes all images of an id identical.

    Per identity, the first half of the images is training data; of the rest
    one is a query and the others gallery items. Camera ids cycle over
    ``num_cams``.
    """
    if num_ids < 2 or per_id < 2 or h < 8 or w < 1 or num_cams < 1 or noise < 0:
        raise ValueError("invalid synthetic dataset parameters")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    root = np.random.default_rng(seed)
    patterns = _id_patterns(np.random.default_rng(root.integers(0, 2**32)), num_ids, h, w)
    noise_rng = np.random.default_rng(root.integers(0, 2**32))
    cam_cast = 1.0 + noise * root.uniform(-0.5, 0.5, size=(num_cams, 3, 1, 1))
    max_shift = int(np.ceil(noise * h / 12))
    n_train = per_id // 2
    records = []
    for pid in range(num_ids):
        base = patterns[pid]
        for j in range(per_id):
            cam = j % num_cams
            img = base
            if noise > 0:
                shift = int(noise_rng.integers(-max_shift, max_shift + 1))
                img = np.roll(img, shift, axis=1) * cam_cast[cam]
                ph = int(noise_rng.integers(1, max(2, int(noise * h / 3))))
                top = int(noise_rng.integers(0, h - ph + 1))
                img[:, top:top + ph, :] = noise_rng.uniform(30, 225, size=(3, 1, 1))
                img = img + noise_rng.normal(0, 64 * noise, size=img.shape)
            img = np.clip(img, 0, 255)
            if j < n_train:
                split = "train"
            elif j == n_train and per_id - n_train >= 2:
                split = "query"
            else:
                split = "gallery"
            rel = f"images/{pid:04d}_c{cam + 1}_{j:03d}.cant"
            blob.write_blob(out / rel, img)
            records.append(SampleRecord(pid, cam, split, rel))
    manifest = Manifest(records, out)
    manifest.save(out / "manifest.jsonl")
    return manifest
